"""Frozen visual backbone producing preliminary embeddings f^v.

A small randomly initialized transformer stands in for a large pre-trained
encoder: everything downstream treats it as a fixed feature extractor, so the
only requirements are determinism and a frozen parameter set. With
freeze=False the same forward builds a graph and gradients flow normally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass
class PatchConfig:
    patch_h: int = 4
    patch_w: int = 4
    d_v: int = 64
    num_layers: int = 2
    num_heads: int = 4
    freeze: bool = True


@dataclass
class VisualFeatures:
    """f^v split into the aggregate CLS vector and the local patch grid."""
    global_vec: Tensor
    local_grid: Tensor

    def kv(self) -> Tensor:
        """Key/value bank for cross-attention: CLS first, then the L_v locals."""
        b, d = self.global_vec.shape
        return ad.concat([ad.reshape(self.global_vec, (b, 1, d)), self.local_grid], axis=1)


def patchify(images: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """(B,C,H,W) -> (B, L_v, C*ph*pw); patches scan left-to-right, top-to-bottom."""
    b, c, h, w = images.shape
    if h % ph or w % pw:
        raise ValueError(f"image {h}x{w} not divisible by patch {ph}x{pw}")
    gh, gw = h // ph, w // pw
    x = images.reshape(b, c, gh, ph, gw, pw)
    return np.ascontiguousarray(x.transpose(0, 2, 4, 1, 3, 5)).reshape(b, gh * gw, c * ph * pw)


def unpatchify(rows: np.ndarray, c: int, h: int, w: int, ph: int, pw: int) -> np.ndarray:
    b = rows.shape[0]
    gh, gw = h // ph, w // pw
    x = rows.reshape(b, gh, gw, c, ph, pw).transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(x).reshape(b, c, h, w)


class VisualBackbone(nn.Module):
    def __init__(self, cfg: PatchConfig, image_size, rng: np.random.Generator):
        self.cfg = cfg
        c, h, w = image_size
        self.image_size = tuple(image_size)
        self.l_v = (h // cfg.patch_h) * (w // cfg.patch_w)
        d_patch = c * cfg.patch_h * cfg.patch_w
        self.proj = nn.Linear(d_patch, cfg.d_v, rng)
        self.cls_embed = nn.normal_param(rng, (cfg.d_v,))
        self.pos_embed = nn.normal_param(rng, (self.l_v + 1, cfg.d_v))
        self.blocks = [nn.TransformerBlock(cfg.d_v, cfg.num_heads, rng)
                       for _ in range(cfg.num_layers)]
        if cfg.freeze:
            self.freeze()

    def _forward(self, images: np.ndarray) -> VisualFeatures:
        rows = patchify(images, self.cfg.patch_h, self.cfg.patch_w)
        x = self.proj(Tensor(rows))
        b = images.shape[0]
        cls = ad.broadcast_to(ad.reshape(self.cls_embed, (1, 1, -1)), (b, 1, self.cfg.d_v))
        x = ad.add(ad.concat([cls, x], axis=1), self.pos_embed)
        for blk in self.blocks:
            x = blk(x)
        return VisualFeatures(x[:, 0], x[:, 1:])

    def embed(self, images: np.ndarray) -> VisualFeatures:
        if not self.cfg.freeze:
            return self._forward(images)
        # frozen: skip the tape entirely, outputs are constants downstream
        with ad.no_grad():
            return self._forward(images)
