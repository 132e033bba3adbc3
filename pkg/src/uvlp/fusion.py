"""Image-text fusion encoder E_Q.

A stack of transformer blocks runs over the concatenation [Q; X^t] of L_q
learnable query embeddings and the embedded report. Task identity is carried
entirely by the self-attention mask: queries-only/text-only (contrastive),
fully bidirectional (matching), or multimodal-causal (generation). Cross
attention lets only the query rows read the frozen visual bank; text rows pass
through that sublayer unchanged. One parameter set serves the encoder and
text-generator views, so there is no duplicated storage to keep in sync.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .text import DEC, EOS


class MaskKind(enum.Enum):
    UNIMODAL = "unimodal"
    BIDIRECTIONAL = "bidirectional"
    MULTIMODAL_CAUSAL = "multimodal_causal"


@dataclass
class FusionConfig:
    l_q: int = 8
    d_q: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    cross_attn_every: int = 1
    l_t: int = 16
    vocab_size: int = 256
    d_v: int = 64


@dataclass
class FusedOutput:
    f_q: Tensor
    f_t: Tensor

    @property
    def f_t_special(self) -> Tensor:
        return self.f_t[:, 0]


def build_mask(kind: MaskKind, l_q: int, text_valid: np.ndarray) -> np.ndarray:
    """Allow-matrix (S,S) for one sample; PAD columns are disallowed everywhere."""
    text_valid = np.asarray(text_valid, dtype=bool)
    l_t = text_valid.shape[0]
    s = l_q + l_t
    allow = np.zeros((s, s), dtype=bool)
    if kind is MaskKind.UNIMODAL:
        allow[:l_q, :l_q] = True
        allow[l_q:, l_q:] = True
    elif kind is MaskKind.BIDIRECTIONAL:
        allow[:] = True
    elif kind is MaskKind.MULTIMODAL_CAUSAL:
        allow[:l_q, :l_q] = True
        allow[l_q:, :l_q] = True
        allow[l_q:, l_q:] = np.tril(np.ones((l_t, l_t), dtype=bool))
    else:
        raise ValueError(f"unknown mask kind {kind!r}")
    allow[:, l_q:] &= text_valid[None, :]
    return allow


def build_masks(kind, l_q: int, text_valid: np.ndarray) -> np.ndarray:
    """Batched (B,S,S) version of build_mask. `kind` may be one MaskKind for
    the whole batch or a per-sample sequence, letting mixed-regime batches
    share a single encoder pass."""
    valid = np.asarray(text_valid, dtype=bool)
    kinds = [kind] * len(valid) if isinstance(kind, MaskKind) else list(kind)
    if len(kinds) != len(valid):
        raise ValueError("one mask kind per sample required")
    return np.stack([build_mask(k, l_q, v) for k, v in zip(kinds, valid)])


class FusionBlock(nn.Module):
    def __init__(self, d: int, d_v: int, num_heads: int, rng, use_cross: bool):
        self.ln_self = nn.LayerNorm(d)
        self.attn = nn.MultiHeadSelfAttention(d, num_heads, rng)
        if use_cross:
            self.ln_cross = nn.LayerNorm(d)
            self.cross = nn.CrossAttention(d, d_v, num_heads, rng)
        else:
            self.cross = None
        self.ln_ffn = nn.LayerNorm(d)
        self.ffn = nn.FeedForward(d, 4 * d, rng)

    def __call__(self, x: Tensor, allow: np.ndarray, kv, l_q: int, record=None) -> Tensor:
        x = ad.add(x, self.attn(self.ln_self(x), allow, record))
        if self.cross is not None and kv is not None:
            xq, xt = x[:, :l_q], x[:, l_q:]
            xq = ad.add(xq, self.cross(self.ln_cross(xq), kv))
            x = ad.concat([xq, xt], axis=1)
        return ad.add(x, self.ffn(self.ln_ffn(x)))


class FusionEncoder(nn.Module):
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.queries = nn.normal_param(rng, (cfg.l_q, cfg.d_q))
        self.word_embed = nn.Embedding(cfg.vocab_size, cfg.d_q, rng)
        self.text_pos = nn.normal_param(rng, (cfg.l_t, cfg.d_q))
        self.blocks = [
            FusionBlock(cfg.d_q, cfg.d_v, cfg.num_heads, rng,
                        use_cross=(i % cfg.cross_attn_every == 0))
            for i in range(cfg.num_blocks)
        ]
        self.final_ln = nn.LayerNorm(cfg.d_q)

    def __call__(self, text_ids: np.ndarray, text_valid: np.ndarray, visual_kv,
                 kind: MaskKind, record_attn: list | None = None) -> FusedOutput:
        b, l_t = text_ids.shape
        cfg = self.cfg
        if l_t != cfg.l_t:
            raise ValueError(f"text length {l_t} != configured {cfg.l_t}")
        xt = ad.add(self.word_embed(text_ids), self.text_pos)
        xq = ad.broadcast_to(ad.reshape(self.queries, (1, cfg.l_q, cfg.d_q)),
                             (b, cfg.l_q, cfg.d_q))
        x = ad.concat([xq, xt], axis=1)
        allow = build_masks(kind, cfg.l_q, text_valid)
        for blk in self.blocks:
            x = blk(x, allow, visual_kv, cfg.l_q, record_attn)
        x = self.final_ln(x)
        return FusedOutput(x[:, : cfg.l_q], x[:, cfg.l_q :])


def decode_step(encoder: FusionEncoder, itg_head, prefix_ids: np.ndarray,
                prefix_valid: np.ndarray, visual_kv) -> np.ndarray:
    """Next-token distribution (B,|V|) at each sequence's last valid position."""
    with ad.no_grad():
        out = encoder(prefix_ids, prefix_valid, visual_kv, MaskKind.MULTIMODAL_CAUSAL)
        last = prefix_valid.sum(axis=1) - 1
        f_last = out.f_t.data[np.arange(prefix_ids.shape[0]), last]
        logits = itg_head(Tensor(f_last)).data
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _pad_prefixes(seqs: list[list[int]], l_t: int):
    ids = np.zeros((len(seqs), l_t), dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
    return ids, ids != 0


def greedy_decode(encoder: FusionEncoder, itg_head, visual_kv, max_len=None) -> list[list[int]]:
    """Deterministic argmax decoding from [DEC], terminated by EOS or length."""
    l_t = encoder.cfg.l_t if max_len is None else min(max_len, encoder.cfg.l_t)
    b = visual_kv.shape[0]
    seqs = [[DEC] for _ in range(b)]
    done = [False] * b
    while not all(done) and min(len(s) for s in seqs) < l_t:
        ids, valid = _pad_prefixes(seqs, encoder.cfg.l_t)
        probs = decode_step(encoder, itg_head, ids, valid, visual_kv)
        for r in range(b):
            if done[r] or len(seqs[r]) >= l_t:
                done[r] = True
                continue
            tok = int(np.argmax(probs[r]))
            seqs[r].append(tok)
            if tok == EOS:
                done[r] = True
    return seqs


def beam_decode(encoder: FusionEncoder, itg_head, visual_kv, width: int = 3,
                max_len=None) -> list[int]:
    """Beam search for a single sample's kv bank (1,L_v+1,d_v); returns best ids."""
    if visual_kv.shape[0] != 1:
        raise ValueError("beam_decode expects a single sample")
    l_t = encoder.cfg.l_t if max_len is None else min(max_len, encoder.cfg.l_t)
    beams = [([DEC], 0.0, False)]
    while any(not d for _, _, d in beams) and min(len(s) for s, _, _ in beams) < l_t:
        candidates = [(s, lp, True) for s, lp, d in beams if d or len(s) >= l_t]
        live = [(s, lp) for s, lp, d in beams if not d and len(s) < l_t]
        if live:
            ids, valid = _pad_prefixes([s for s, _ in live], encoder.cfg.l_t)
            kv_rep = ad.broadcast_to(visual_kv, (len(live),) + visual_kv.shape[1:])
            probs = decode_step(encoder, itg_head, ids, valid, kv_rep)
            logp = np.log(np.maximum(probs, 1e-300))
            for (s, lp), row in zip(live, logp):
                order = np.argsort(-row, kind="stable")[:width]
                for tok in order:
                    tok = int(tok)
                    candidates.append((s + [tok], lp + float(row[tok]), tok == EOS))
        candidates.sort(key=lambda c: (-c[1], c[0]))
        beams = candidates[:width]
    return max(beams, key=lambda c: c[1])[0]
