"""Evaluation protocols: retrieval, zero-shot, NLG metrics, priors, sampling.

All scoring reuses the training-time contrastive scorer (max-over-queries
cosine) so evaluation measures exactly what was optimized.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import corpus as corpusmod
from . import nn
from . import objectives as obj
from .autodiff import Tensor
from .fusion import MaskKind
from .model import VLModel, encode_batch
from .optim import AdamW
from .text import CLS, PAD, Vocabulary


# -- embeddings --------------------------------------------------------------


def embed_images(model: VLModel, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Normalized per-query embeddings g^q, shape (N, L_q, d_proj)."""
    cfg = model.cfg.fusion
    out = []
    with ad.no_grad():
        for i in range(0, len(images), chunk):
            imgs = images[i : i + chunk]
            kv, _ = model.visual_kv(imgs)
            b = imgs.shape[0]
            ids = np.zeros((b, cfg.l_t), dtype=np.int64)
            ids[:, 0] = CLS
            res = model.encoder(ids, ids != PAD, kv, MaskKind.UNIMODAL)
            gq = ad.l2_normalize(model.heads.itc_q(res.f_q))
            out.append(gq.data)
    return np.concatenate(out)


def embed_texts(model: VLModel, word_lists: list[list[str]], vocab: Vocabulary,
                chunk: int = 64) -> np.ndarray:
    """Normalized text embeddings g^t, shape (N, d_proj). Text rows never see
    the queries under the UNIMODAL mask, so a zero visual bank is fine."""
    cfg = model.cfg.fusion
    out = []
    with ad.no_grad():
        for i in range(0, len(word_lists), chunk):
            batch = encode_batch(word_lists[i : i + chunk], vocab, cfg.l_t)
            b = batch.ids_cls.shape[0]
            kv = Tensor(np.zeros((b, model.backbone.l_v + 1, cfg.d_v)))
            res = model.encoder(batch.ids_cls, batch.valid_cls, kv, MaskKind.UNIMODAL)
            gt = ad.l2_normalize(model.heads.itc_t(res.f_t_special))
            out.append(gt.data)
    return np.concatenate(out)


def pairwise_similarity(gq: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """(Nq, Ng) image-text scores: max over the L_q query embeddings."""
    return np.einsum("qld,gd->qlg", gq, gt).max(axis=1)


# -- retrieval ---------------------------------------------------------------


@dataclass
class RetrievalResult:
    direction: str
    map_at: dict


def average_precision_at_k(rel, k: int, n_relevant: int) -> float:
    """AP over the top-k ranks, denominator min(k, total relevant in gallery)."""
    if n_relevant == 0:
        return 0.0
    hits = 0
    total = 0.0
    for i, r in enumerate(rel[:k]):
        if r:
            hits += 1
            total += hits / (i + 1)
    return total / min(k, n_relevant)


def retrieve(scores: np.ndarray, query_labels, gallery_labels,
             ks=(1, 5, 10), direction: str = "image_to_text") -> RetrievalResult:
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    if gallery_labels.size == 0:
        raise ValueError("empty gallery")
    order = np.argsort(-scores, axis=1, kind="stable")
    rel = gallery_labels[order] == query_labels[:, None]
    n_rel = (gallery_labels[None, :] == query_labels[:, None]).sum(axis=1)
    map_at = {}
    for k in ks:
        aps = [average_precision_at_k(rel[q], k, int(n_rel[q]))
               for q in range(scores.shape[0])]
        map_at[k] = float(np.mean(aps))
    return RetrievalResult(direction, map_at)


# -- zero-shot classification -------------------------------------------------


def zero_shot_classify(model: VLModel, images: np.ndarray, vocab: Vocabulary,
                       ensembles: list[list[list[str]]]):
    """Class scores by mean-over-prompts ITC similarity; returns (pred, scores)."""
    if any(len(e) == 0 for e in ensembles):
        raise ValueError("every class needs at least one prompt")
    flat = [p for ens in ensembles for p in ens]
    gt = embed_texts(model, flat, vocab)
    gq = embed_images(model, images)
    sims = pairwise_similarity(gq, gt)
    scores = np.zeros((len(images), len(ensembles)))
    col = 0
    for c, ens in enumerate(ensembles):
        scores[:, c] = sims[:, col : col + len(ens)].mean(axis=1)
        col += len(ens)
    return scores.argmax(axis=1), scores


def default_ensembles(num_classes: int) -> list[list[list[str]]]:
    return [corpusmod.class_prompts(c) for c in range(num_classes)]


# -- NLG metrics ---------------------------------------------------------------


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate, references, n: int) -> float:
    """Clipped n-gram precision, geometric mean over 1..n, brevity penalty."""
    if n < 1 or n > 4:
        raise ValueError("n must be in 1..4")
    if not candidate:
        return 0.0
    log_sum = 0.0
    for i in range(1, n + 1):
        cand = _ngrams(candidate, i)
        total = sum(cand.values())
        if total == 0:
            return 0.0
        max_ref = Counter()
        for ref in references:
            for g, c in _ngrams(ref, i).items():
                max_ref[g] = max(max_ref[g], c)
        clipped = sum(min(c, max_ref[g]) for g, c in cand.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    geo = math.exp(log_sum / n)
    c_len = len(candidate)
    r_len = min((len(r) for r in references),
                key=lambda L: (abs(L - c_len), L))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * geo


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, 1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta2: float = 1.2 ** 2) -> float:
    """LCS-based F-measure with recall weight beta^2 (default 1.44)."""
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1.0 + beta2) * p * r / (r + beta2 * p)


# -- autoregressive code priors -------------------------------------------------


class CodePrior(nn.Module):
    """Small causal transformer over a flattened code grid in raster order.

    Vocabulary is the codebook size plus one BOS token at index k. When
    cond_k is given, a per-site conditioning embedding (the upsampled top
    grid for the bottom prior) is added to the inputs.
    """

    def __init__(self, k: int, seq_len: int, rng: np.random.Generator,
                 d_model: int = 64, num_heads: int = 4, num_layers: int = 2,
                 cond_k=None):
        self.k = k
        self.seq_len = seq_len
        self.tok = nn.Embedding(k + 1, d_model, rng)
        self.pos = nn.normal_param(rng, (seq_len, d_model))
        self.cond = nn.Embedding(cond_k, d_model, rng) if cond_k else None
        self.blocks = [nn.TransformerBlock(d_model, num_heads, rng)
                       for _ in range(num_layers)]
        self.ln = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, k, rng)
        self.trained = False

    def logits(self, grids: np.ndarray, cond_idx=None) -> Tensor:
        b, t = grids.shape
        if t != self.seq_len:
            raise ValueError(f"sequence length {t} != {self.seq_len}")
        inputs = np.concatenate(
            [np.full((b, 1), self.k, dtype=np.int64), grids[:, :-1]], axis=1)
        x = ad.add(self.tok(inputs), self.pos)
        if self.cond is not None:
            if cond_idx is None:
                raise ValueError("conditioned prior needs cond_idx")
            x = ad.add(x, self.cond(cond_idx))
        allow = np.broadcast_to(np.tril(np.ones((t, t), dtype=bool)), (b, t, t))
        for blk in self.blocks:
            x = blk(x, allow)
        return self.head(self.ln(x))

    def nll(self, grids: np.ndarray, cond_idx=None) -> float:
        """Mean negative log-likelihood in nats per site."""
        with ad.no_grad():
            ls = ad.log_softmax(self.logits(grids, cond_idx), axis=-1)
            picked = ad.gather_last(ls, grids)
        return float(-picked.data.mean())

    def sample(self, num: int, rng: np.random.Generator, cond_idx=None) -> np.ndarray:
        if not self.trained:
            raise RuntimeError("prior has not been trained")
        grids = np.zeros((num, self.seq_len), dtype=np.int64)
        with ad.no_grad():
            for t in range(self.seq_len):
                logits = self.logits(grids, cond_idx).data[:, t, :]
                z = logits - logits.max(axis=-1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=-1, keepdims=True)
                u = rng.random(num)
                grids[:, t] = (p.cumsum(axis=1) > u[:, None]).argmax(axis=1)
        return grids


def upsample_indices(top_idx: np.ndarray, factor: int) -> np.ndarray:
    return top_idx.repeat(factor, axis=1).repeat(factor, axis=2)


def train_priors(top_grids: np.ndarray, bot_grids: np.ndarray, k_top: int, k_bot: int,
                 seed: int = 0, steps: int = 400, lr: float = 1e-3, batch: int = 32,
                 d_model: int = 64):
    """Maximum-likelihood training of the top prior then the conditioned bottom
    prior; returns (prior_top, prior_bot)."""
    n, ht, wt = top_grids.shape
    _, hb, wb = bot_grids.shape
    if n < 2:
        raise ValueError("need at least 2 code grids")
    factor = hb // ht
    tops = top_grids.reshape(n, ht * wt)
    bots = bot_grids.reshape(n, hb * wb)
    cond = upsample_indices(top_grids, factor).reshape(n, hb * wb)

    def fit(prior, data, cond_data, stream):
        opt = AdamW(prior.parameters(), weight_decay=0.0)
        rng = np.random.default_rng(np.random.SeedSequence([seed, stream]))
        for _ in range(steps):
            idx = rng.integers(0, n, size=min(batch, n))
            logits = prior.logits(data[idx], None if cond_data is None else cond_data[idx])
            b, t, k = logits.shape
            loss = obj.cross_entropy(ad.reshape(logits, (b * t, k)),
                                     data[idx].reshape(-1))
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            opt.zero_grad()
        prior.trained = True

    prior_top = CodePrior(k_top, ht * wt,
                          np.random.default_rng(np.random.SeedSequence([seed, 0])),
                          d_model=d_model)
    fit(prior_top, tops, None, 10)
    prior_bot = CodePrior(k_bot, hb * wb,
                          np.random.default_rng(np.random.SeedSequence([seed, 1])),
                          d_model=d_model, cond_k=k_top)
    fit(prior_bot, bots, cond, 11)
    return prior_top, prior_bot


def sample_codes(prior_top: CodePrior, prior_bot: CodePrior, num: int, seed: int,
                 top_shape, bot_shape):
    """Ancestral sampling: top grid first, bottom conditioned on it."""
    ht, wt = top_shape
    hb, wb = bot_shape
    rng = np.random.default_rng(seed)
    tops = prior_top.sample(num, rng).reshape(num, ht, wt)
    cond = upsample_indices(tops, hb // ht).reshape(num, hb * wb)
    bots = prior_bot.sample(num, rng, cond).reshape(num, hb, wb)
    return tops, bots


# -- reconstruction ------------------------------------------------------------


def reconstruction_report(model: VLModel, pairs, vocab: Vocabulary, chunk: int = 64):
    """Per-image reconstruction MSE and PSNR rows (PSNR inf when MSE is 0)."""
    rows = []
    for i in range(0, len(pairs), chunk):
        part = pairs[i : i + chunk]
        images = np.stack([p.image for p in part])
        batch = encode_batch([p.words for p in part], vocab, model.cfg.fusion.l_t)
        recon = model.reconstruct(images, batch)
        mse = ((recon - images) ** 2).mean(axis=(1, 2, 3))
        for j, p in enumerate(part):
            m = float(mse[j])
            psnr = math.inf if m == 0.0 else 10.0 * math.log10(1.0 / m)
            rows.append({"index": i + j, "class_id": p.class_id, "mse": m, "psnr": psnr})
    return rows


# -- image output ----------------------------------------------------------------


def to_uint8(images: np.ndarray) -> np.ndarray:
    return (np.clip(images, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def save_png_grid(images: np.ndarray, path, ncol: int = 4) -> None:
    """Tile (N,C,H,W) images into one PNG; grayscale for C=1, RGB for C=3."""
    from PIL import Image

    arr = to_uint8(images)
    n, c, h, w = arr.shape
    ncol = min(ncol, n)
    nrow = (n + ncol - 1) // ncol
    gap = 2
    canvas = np.zeros((c, nrow * h + (nrow - 1) * gap, ncol * w + (ncol - 1) * gap),
                      dtype=np.uint8)
    for i in range(n):
        r, q = divmod(i, ncol)
        canvas[:, r * (h + gap) : r * (h + gap) + h,
               q * (w + gap) : q * (w + gap) + w] = arr[i]
    if c == 1:
        img = Image.fromarray(canvas[0], mode="L")
    else:
        img = Image.fromarray(canvas.transpose(1, 2, 0), mode="RGB")
    img.save(path)
