"""Text-side training objectives: contrastive, matching, generation.

The numerical cores here take already-computed fusion outputs (or logits) so
they can be verified against naive reference implementations in isolation;
the composite model wires them to the right mask regimes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .text import PAD


@dataclass
class BatchSimilarity:
    """S[k][n] = max over queries of cosine(image k query, text n); rows=images."""
    S: np.ndarray


class ProjectionHeads(nn.Module):
    """Task heads plus the learnable contrastive temperature.

    tau is stored as log_tau so it stays positive under unconstrained updates.
    """

    def __init__(self, d_q: int, d_proj: int, vocab_size: int, rng: np.random.Generator,
                 init_tau: float = 0.07):
        self.itc_q = nn.Linear(d_q, d_proj, rng)
        self.itc_t = nn.Linear(d_q, d_proj, rng)
        self.itm = nn.Linear(d_q, 2, rng)
        self.itg = nn.Linear(d_q, vocab_size, rng)
        self.log_tau = Tensor(np.array(math.log(init_tau)), requires_grad=True)

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))


def similarity_matrix(f_q: Tensor, f_t_cls: Tensor, heads: ProjectionHeads) -> Tensor:
    """Cosine similarities with max over the L_q image-side query embeddings."""
    n, l_q, _ = f_q.shape
    gq = ad.l2_normalize(heads.itc_q(f_q))
    gt = ad.l2_normalize(heads.itc_t(f_t_cls))
    d_proj = gt.shape[-1]
    all_pairs = ad.matmul(ad.reshape(gq, (n * l_q, d_proj)), ad.swap_last(gt))
    return ad.max_(ad.reshape(all_pairs, (n, l_q, n)), axis=1)


def itc_loss(f_q: Tensor, f_t_cls: Tensor, heads: ProjectionHeads):
    """Bidirectional contrastive loss; returns (loss, BatchSimilarity)."""
    n = f_q.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    s = similarity_matrix(f_q, f_t_cls, heads)
    logits = ad.div(s, ad.exp(heads.log_tau))
    diag = (np.arange(n), np.arange(n))
    loss_qt = ad.mul(ad.mean(ad.log_softmax(logits, axis=1)[diag]), -1.0)
    loss_tq = ad.mul(ad.mean(ad.log_softmax(logits, axis=0)[diag]), -1.0)
    return ad.mul(ad.add(loss_qt, loss_tq), 0.5), BatchSimilarity(s.data.copy())


def mine_hard_negatives(sim: BatchSimilarity, temperature: float, rng):
    """Sample in-batch hard negatives proportional to softmax(S/tau), diagonal excluded.

    Returns (neg_text_idx, neg_image_idx): for image k a non-matching text
    drawn from row k, and for text n a non-matching image drawn from column n.
    """
    rng = np.random.default_rng(rng) if isinstance(rng, int) else rng
    s = sim.S / temperature
    n = s.shape[0]
    if n < 2:
        raise ValueError("hard-negative mining needs a batch of at least 2")

    def draw(logits_set):
        out = np.zeros(n, dtype=np.int64)
        for k, logits in enumerate(logits_set):
            z = logits.copy()
            z[k] = -np.inf
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            out[k] = rng.choice(n, p=p)
        return out

    neg_text = draw(s)
    neg_image = draw(s.T)
    return neg_text, neg_image


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean CE over the leading axis; labels are integer class ids."""
    picked = ad.gather_last(ad.log_softmax(logits, axis=-1), labels)
    return ad.mul(ad.mean(picked), -1.0)


def itm_logits(f_q: Tensor, heads: ProjectionHeads) -> Tensor:
    """Per-pair 2-class logits: head applied per query vector, then averaged."""
    return ad.mean(heads.itm(f_q), axis=1)


def itm_loss(f_q_pos: Tensor, f_q_neg_text: Tensor, f_q_neg_image: Tensor,
             heads: ProjectionHeads) -> Tensor:
    """Match/mismatch CE over the 3N batch (logits averaged over queries first)."""
    n = f_q_pos.shape[0]
    logits = ad.concat([itm_logits(f_q_pos, heads),
                        itm_logits(f_q_neg_text, heads),
                        itm_logits(f_q_neg_image, heads)], axis=0)
    labels = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(2 * n, dtype=np.int64)])
    return cross_entropy(logits, labels)


def itg_loss_from_logits(logits: Tensor, ids: np.ndarray) -> Tensor:
    """Next-token CE: position i predicts ids[:, i+1]; PAD targets excluded.

    Normalized by the count of non-PAD targets rather than the padded length.
    """
    targets = ids[:, 1:]
    keep = targets != PAD
    count = int(keep.sum())
    if count == 0:
        raise ValueError("no non-PAD targets to predict")
    ls = ad.log_softmax(logits[:, :-1, :], axis=-1)
    picked = ad.gather_last(ls, np.where(keep, targets, 0))
    total = ad.sum_(ad.mul(picked, keep.astype(np.float64)))
    return ad.div(ad.mul(total, -1.0), float(count))
