"""Independent naive reference implementations used to validate the package.

Everything here is written directly from the mathematical definitions with
plain loops. Nothing imports from uvlp internals so a bug in the package
cannot hide in its own oracle.
"""

import math

import numpy as np

PAD = 0


def normalize(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def log_softmax_row(row):
    m = max(row)
    z = sum(math.exp(x - m) for x in row)
    return [x - m - math.log(z) for x in row]


def naive_itc(f_q, f_t_cls, w_q, b_q, w_t, b_t, tau):
    """Bidirectional contrastive loss via explicit loops.

    f_q: (n, l_q, d), f_t_cls: (n, d). Projections are x @ w + b followed by
    l2 normalization; similarity is the max over query tokens of the cosine;
    the loss averages image-to-text and text-to-image cross entropies over
    S / tau with the diagonal as targets.
    """
    n, l_q, d = f_q.shape
    d_p = w_q.shape[1]
    g = [[normalize([sum(f_q[i, m, a] * w_q[a, p] for a in range(d)) + b_q[p]
                     for p in range(d_p)])
          for m in range(l_q)] for i in range(n)]
    h = [normalize([sum(f_t_cls[j, a] * w_t[a, p] for a in range(d)) + b_t[p]
                    for p in range(d_p)])
         for j in range(n)]
    s = [[max(sum(g[i][m][p] * h[j][p] for p in range(d_p)) for m in range(l_q))
          for j in range(n)] for i in range(n)]
    loss_i2t = 0.0
    for i in range(n):
        ls = log_softmax_row([s[i][j] / tau for j in range(n)])
        loss_i2t -= ls[i]
    loss_t2i = 0.0
    for j in range(n):
        ls = log_softmax_row([s[i][j] / tau for i in range(n)])
        loss_t2i -= ls[j]
    return 0.5 * (loss_i2t / n + loss_t2i / n)


def naive_itm(f_q_pos, f_q_neg_text, f_q_neg_image, w, b):
    """Two-way matching loss: per-sample logits are the mean over query tokens
    of a linear head, positives labelled 1 and both negative banks 0."""
    rows = list(f_q_pos) + list(f_q_neg_text) + list(f_q_neg_image)
    n = len(f_q_pos)
    labels = [1] * n + [0] * (2 * n)
    total = 0.0
    for fq, lab in zip(rows, labels):
        l_q, d = fq.shape
        logits = [sum(sum(fq[m, a] * w[a, c] for a in range(d)) + b[c]
                      for m in range(l_q)) / l_q for c in range(2)]
        total -= log_softmax_row(logits)[lab]
    return total / len(rows)


def naive_itg(logits, ids):
    """Next-token cross entropy, PAD targets excluded, mean over kept sites."""
    n, l_t, v = logits.shape
    total = 0.0
    count = 0
    for i in range(n):
        for t in range(l_t - 1):
            target = int(ids[i, t + 1])
            if target == PAD:
                continue
            ls = log_softmax_row([float(x) for x in logits[i, t]])
            total -= ls[target]
            count += 1
    return total / count


def naive_nearest(flat, entries):
    """Exhaustive nearest-codebook scan; ties resolve to the lowest index."""
    out = []
    for v in flat:
        best, best_d = 0, math.inf
        for k, e in enumerate(entries):
            d = sum((float(a) - float(b)) ** 2 for a, b in zip(v, e))
            if d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out, dtype=np.int64)


def naive_vq_terms(z_e, entries):
    """Codebook and commitment quantization terms for one level.

    z_e: (b, d, h, w). Both terms equal the mean over sites of the squared
    L2 distance to the assigned entry (they differ only in gradient flow).
    """
    b, d, h, w = z_e.shape
    total = 0.0
    m = b * h * w
    idx = np.zeros((b, h, w), dtype=np.int64)
    for bi in range(b):
        for y in range(h):
            for x in range(w):
                v = [float(z_e[bi, a, y, x]) for a in range(d)]
                k = int(naive_nearest([v], entries)[0])
                idx[bi, y, x] = k
                total += sum((v[a] - float(entries[k][a])) ** 2 for a in range(d))
    term = total / m
    return idx, term, term


def mask_allows(kind: str, l_q: int, valid, i: int, j: int) -> bool:
    """Independent statement of the attention regimes over [queries | text]."""
    if j >= l_q and not valid[j - l_q]:
        return False
    if kind == "unimodal":
        return (i < l_q) == (j < l_q)
    if kind == "bidirectional":
        return True
    if kind == "multimodal_causal":
        if i < l_q:
            return j < l_q
        return j < l_q or j <= i
    raise ValueError(kind)


def brute_ap_at_k(rel_flags, n_relevant: int, k: int) -> float:
    """AP@k with hit precisions divided by min(k, number of relevant items)."""
    if n_relevant == 0:
        return 0.0
    hits = 0
    score = 0.0
    for r, flag in enumerate(rel_flags[:k], 1):
        if flag:
            hits += 1
            score += hits / r
    return score / min(k, n_relevant)


def brute_lcs(a, b) -> int:
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def naive_bleu(candidate, references, n):
    """Geometric mean of clipped n-gram precisions with brevity penalty."""
    if not candidate:
        return 0.0

    def grams(seq, k):
        out = {}
        for i in range(len(seq) - k + 1):
            g = tuple(seq[i:i + k])
            out[g] = out.get(g, 0) + 1
        return out

    log_sum = 0.0
    for order in range(1, n + 1):
        cand = grams(candidate, order)
        total = sum(cand.values())
        if total == 0:
            return 0.0
        clipped = 0
        for g, c in cand.items():
            best = max((grams(r, order).get(g, 0) for r in references), default=0)
            clipped += min(c, best)
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    c_len = len(candidate)
    r_len = min((len(r) for r in references), key=lambda L: (abs(L - c_len), L))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_sum / n)


def naive_rouge_l(candidate, reference, beta2):
    if not candidate or not reference:
        return 0.0
    lcs = brute_lcs(tuple(candidate), tuple(reference))
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1.0 + beta2) * p * r / (r + beta2 * p)
