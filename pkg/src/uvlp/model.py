"""Composite vision-language model: backbone + fusion encoder + heads + TIG bridge.

Construction seeds four independent generator streams (backbone, encoder,
heads, TIG) from one SeedSequence so module initializations do not perturb one
another when configs change.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import fusion as fz
from . import nn
from . import objectives as obj
from . import tig as tigmod
from .autodiff import Tensor
from .backbone import PatchConfig, VisualBackbone
from .fusion import FusionConfig, FusionEncoder, MaskKind
from .text import CLS, DEC, TokenSequence, Vocabulary, encode
from .tig import TIGConfig, TIGGenerator


@dataclass
class ModelConfig:
    image_size: tuple = (1, 32, 32)
    d_proj: int = 32
    patch: PatchConfig = field(default_factory=PatchConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    tig: TIGConfig = field(default_factory=TIGConfig)


@dataclass
class TextBatch:
    """CLS- and DEC-prefixed encodings of one batch of reports."""
    ids_cls: np.ndarray
    valid_cls: np.ndarray
    ids_dec: np.ndarray
    valid_dec: np.ndarray


def encode_batch(word_lists: list[list[str]], vocab: Vocabulary, l_t: int) -> TextBatch:
    seqs_c = [encode(w, vocab, CLS, l_t) for w in word_lists]
    seqs_d = [encode(w, vocab, DEC, l_t, append_eos=True) for w in word_lists]
    return TextBatch(np.stack([s.ids for s in seqs_c]),
                     np.stack([s.attention_valid for s in seqs_c]),
                     np.stack([s.ids for s in seqs_d]),
                     np.stack([s.attention_valid for s in seqs_d]))


class VLModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.fusion.d_v != cfg.patch.d_v:
            raise ValueError("fusion d_v must match backbone d_v")
        self.cfg = cfg
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]
        self.backbone = VisualBackbone(cfg.patch, cfg.image_size, streams[0])
        self.encoder = FusionEncoder(cfg.fusion, streams[1])
        self.heads = obj.ProjectionHeads(cfg.fusion.d_q, cfg.d_proj,
                                         cfg.fusion.vocab_size, streams[2])
        self.gen = TIGGenerator(cfg.tig, cfg.fusion.l_q, cfg.fusion.d_q,
                                self.backbone.l_v, cfg.patch.d_v, cfg.image_size,
                                streams[3])

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    # -- forwards ---------------------------------------------------------

    def visual_kv(self, images: np.ndarray):
        """(kv bank Tensor (B,L_v+1,d_v), local grid Tensor (B,L_v,d_v))."""
        feats = self.backbone.embed(images)
        return feats.kv(), feats.local_grid

    def forward_unimodal(self, batch: TextBatch, kv) -> fz.FusedOutput:
        return self.encoder(batch.ids_cls, batch.valid_cls, kv, MaskKind.UNIMODAL)

    def forward_bidirectional(self, ids, valid, kv) -> fz.FusedOutput:
        return self.encoder(ids, valid, kv, MaskKind.BIDIRECTIONAL)

    def forward_causal(self, batch: TextBatch, kv) -> fz.FusedOutput:
        return self.encoder(batch.ids_dec, batch.valid_dec, kv, MaskKind.MULTIMODAL_CAUSAL)

    def itg_logits(self, batch: TextBatch, kv) -> Tensor:
        out = self.forward_causal(batch, kv)
        return self.heads.itg(out.f_t)

    # -- decoding ---------------------------------------------------------

    def greedy_report(self, images: np.ndarray) -> list[list[int]]:
        kv, _ = self.visual_kv(images)
        return fz.greedy_decode(self.encoder, self.heads.itg, kv)

    def beam_report(self, image: np.ndarray, width: int = 3) -> list[int]:
        kv, _ = self.visual_kv(image[None])
        return fz.beam_decode(self.encoder, self.heads.itg, kv, width)

    def decode_step(self, prefix: TokenSequence, images: np.ndarray) -> np.ndarray:
        kv, _ = self.visual_kv(images)
        ids = prefix.ids[None] if prefix.ids.ndim == 1 else prefix.ids
        valid = prefix.attention_valid[None] if prefix.attention_valid.ndim == 1 else prefix.attention_valid
        return fz.decode_step(self.encoder, self.heads.itg, ids, valid, kv)

    # -- reconstruction ---------------------------------------------------

    def reconstruct(self, images: np.ndarray, batch: TextBatch) -> np.ndarray:
        """Full TIG pipeline under no_grad; returns decoded images."""
        with ad.no_grad():
            kv, local = self.visual_kv(images)
            out = self.forward_bidirectional(batch.ids_cls, batch.valid_cls, kv)
            z_e_top = self.gen.adapter_top(out.f_q)
            z_q_top, _, _ = self.gen.quantize_top(z_e_top)
            bottom_in = tigmod.assemble_bottom_latent(local, out.f_t_special)
            z_e_bot = self.gen.adapter_bot(bottom_in)
            z_q_bot, _, _ = self.gen.quantize_bottom_conditioned(z_e_bot, z_q_top)
            recon = self.gen.decode(z_q_top, z_q_bot)
        return recon.data

    def encode_codes(self, images: np.ndarray, batch: TextBatch):
        """Quantizer index grids (top_idx, bot_idx) for prior training."""
        with ad.no_grad():
            kv, local = self.visual_kv(images)
            out = self.forward_bidirectional(batch.ids_cls, batch.valid_cls, kv)
            z_e_top = self.gen.adapter_top(out.f_q)
            z_q_top, top_idx, _ = self.gen.quantize_top(z_e_top)
            bottom_in = tigmod.assemble_bottom_latent(local, out.f_t_special)
            z_e_bot = self.gen.adapter_bot(bottom_in)
            _, bot_idx, _ = self.gen.quantize_bottom_conditioned(z_e_bot, z_q_top)
        return top_idx, bot_idx
