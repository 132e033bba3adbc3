"""Text-grounded image generation bridge.

Latent adapters map fused multi-modal features onto two spatial grids, a
two-level vector quantizer discretizes them (bottom conditioned on top), and a
small hierarchical decoder reconstructs pixels. Gradients cross the quantizer
by the straight-through copy; codebooks train only through the explicit
codebook term, encoders additionally through the commitment term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from . import nn
from .autodiff import Tensor


@dataclass
class TIGConfig:
    d_code: int = 32
    k_top: int = 64
    k_bot: int = 64
    h_top: int = 2
    w_top: int = 2
    h_bot: int = 8
    w_bot: int = 8
    adapter_hidden: int = 32
    decoder_hidden: int = 32
    beta1: float = 0.5
    beta2: float = 0.5


@dataclass
class LatentMaps:
    """Quantizer inputs/outputs for one batch; z_q rows are exact codebook entries."""
    z_e_top: np.ndarray
    z_q_top: np.ndarray
    top_idx: np.ndarray
    z_e_bot: np.ndarray
    z_q_bot: np.ndarray
    bot_idx: np.ndarray


class Codebook(nn.Module):
    def __init__(self, k: int, d_code: int, rng: np.random.Generator):
        self.entries = Tensor(rng.uniform(-1.0 / k, 1.0 / k, size=(k, d_code)),
                              requires_grad=True)
        self.usage = np.zeros(k, dtype=np.int64)

    @property
    def k(self) -> int:
        return self.entries.shape[0]

    def record_usage(self, idx: np.ndarray) -> None:
        np.add.at(self.usage, idx.reshape(-1), 1)


def straight_through(z_e: Tensor, z_q_data: np.ndarray) -> Tensor:
    """Forward the quantized values exactly; copy the gradient onto z_e unchanged."""
    return Tensor._make(z_q_data, (z_e,), lambda g: z_e._accum(g))


def quantize(z_e: Tensor, book: Codebook):
    """Nearest-entry quantization with straight-through gradients.

    Returns (z_q, indices (B,h,w), (codebook_term, commitment_term)); the two
    terms are squared L2 over features, averaged over spatial sites.
    """
    b, d, h, w = z_e.shape
    if d != book.entries.shape[1]:
        raise ValueError(f"latent dim {d} != codebook dim {book.entries.shape[1]}")
    flat = ad.reshape(ad.transpose(z_e, (0, 2, 3, 1)), (b * h * w, d))
    idx = kernels.nearest_code(flat.data, book.entries.data)
    e_sel = ad.embedding(book.entries, idx)
    m = float(b * h * w)
    diff_cb = ad.sub(ad.stop_gradient(flat), e_sel)
    codebook_term = ad.div(ad.sum_(ad.mul(diff_cb, diff_cb)), m)
    diff_cm = ad.sub(ad.stop_gradient(e_sel), flat)
    commitment_term = ad.div(ad.sum_(ad.mul(diff_cm, diff_cm)), m)
    z_q_data = np.ascontiguousarray(
        book.entries.data[idx].reshape(b, h, w, d).transpose(0, 3, 1, 2))
    z_q = straight_through(z_e, z_q_data)
    return z_q, idx.reshape(b, h, w), (codebook_term, commitment_term)


class LatentAdapter(nn.Module):
    """Tokens -> spatial map: linear token mixer, feature projection,
    learned spatial positional encodings, one residual conv block."""

    def __init__(self, n_tokens: int, d_in: int, d_code: int, h: int, w: int,
                 hidden: int, rng: np.random.Generator):
        self.h, self.w = h, w
        self.mixer = nn.Linear(n_tokens, h * w, rng)
        self.proj = nn.Linear(d_in, d_code, rng)
        self.pos = nn.normal_param(rng, (d_code, h, w))
        self.res = nn.ResBlock2d(d_code, hidden, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        b, n, d_in = tokens.shape
        mixed = ad.swap_last(self.mixer(ad.swap_last(tokens)))
        x = self.proj(mixed)
        x = ad.transpose(ad.reshape(x, (b, self.h, self.w, -1)), (0, 3, 1, 2))
        return self.res(ad.add(x, self.pos))


def assemble_bottom_latent(f_v_local: Tensor, f_t_cls: Tensor) -> Tensor:
    """Broadcast f_t_cls onto every local visual row and concat along features."""
    b, l_v, _ = f_v_local.shape
    d_t = f_t_cls.shape[-1]
    rep = ad.broadcast_to(ad.reshape(f_t_cls, (b, 1, d_t)), (b, l_v, d_t))
    return ad.concat([f_v_local, rep], axis=-1)


class TIGGenerator(nn.Module):
    def __init__(self, cfg: TIGConfig, l_q: int, d_q: int, l_v: int, d_v: int,
                 image_size, rng: np.random.Generator):
        self.cfg = cfg
        c, hh, ww = image_size
        self.image_size = tuple(image_size)
        if l_v != cfg.h_bot * cfg.w_bot:
            raise ValueError(f"L_v {l_v} != bottom grid {cfg.h_bot}x{cfg.w_bot}")
        if cfg.h_bot % cfg.h_top or cfg.w_bot % cfg.w_top:
            raise ValueError("bottom grid must be a multiple of the top grid")
        self.up_factor = cfg.h_bot // cfg.h_top
        self.adapter_top = LatentAdapter(l_q, d_q, cfg.d_code, cfg.h_top, cfg.w_top,
                                         cfg.adapter_hidden, rng)
        self.adapter_bot = LatentAdapter(l_v, d_v + d_q, cfg.d_code, cfg.h_bot, cfg.w_bot,
                                         cfg.adapter_hidden, rng)
        self.book_top = Codebook(cfg.k_top, cfg.d_code, rng)
        self.book_bot = Codebook(cfg.k_bot, cfg.d_code, rng)
        self.cond_proj = nn.Conv2d(2 * cfg.d_code, cfg.d_code, 1, rng)
        # pixel upsampling: h_bot -> H by stride-2 transposed convs
        n_up = 0
        side = cfg.h_bot
        while side < hh:
            side *= 2
            n_up += 1
        if side != hh or cfg.w_bot * (hh // cfg.h_bot) != ww:
            raise ValueError(f"cannot reach {hh}x{ww} from {cfg.h_bot}x{cfg.w_bot} by doubling")
        ch = cfg.decoder_hidden
        self.dec_in = nn.Conv2d(2 * cfg.d_code, ch, 3, rng, pad=1)
        self.dec_up = [nn.ConvTranspose2d(ch, c if i == n_up - 1 else ch, 4, 2, rng, pad=1)
                       for i in range(n_up)]

    def quantize_top(self, z_e_top: Tensor):
        return quantize(z_e_top, self.book_top)

    def condition_bottom(self, z_e_bot: Tensor, z_q_top: Tensor) -> Tensor:
        """Concat nearest-upsampled top codes onto z_e_bot, project back to d_code."""
        up = nn.nearest_upsample2d(z_q_top, self.up_factor)
        return self.cond_proj(ad.concat([z_e_bot, up], axis=1))

    def quantize_bottom_conditioned(self, z_e_bot: Tensor, z_q_top: Tensor):
        return quantize(self.condition_bottom(z_e_bot, z_q_top), self.book_bot)

    def decode(self, z_q_top: Tensor, z_q_bot: Tensor) -> Tensor:
        up = nn.nearest_upsample2d(z_q_top, self.up_factor)
        x = self.dec_in(ad.concat([z_q_bot, up], axis=1))
        for layer in self.dec_up:
            x = layer(ad.relu(x))
        return x

    def codes_to_images(self, top_idx: np.ndarray, bot_idx: np.ndarray) -> np.ndarray:
        """Decode sampled index grids to pixel space (no gradients)."""
        with ad.no_grad():
            zt = self.book_top.entries.data[top_idx].transpose(0, 3, 1, 2)
            zb = self.book_bot.entries.data[bot_idx].transpose(0, 3, 1, 2)
            out = self.decode(Tensor(np.ascontiguousarray(zt)),
                              Tensor(np.ascontiguousarray(zb)))
        return out.data


def tig_loss(images: np.ndarray, f_q: Tensor, f_v_local: Tensor, f_t_cls: Tensor,
             gen: TIGGenerator):
    """Reconstruction MSE plus both levels' VQ terms; returns (loss, LatentMaps)."""
    cfg = gen.cfg
    z_e_top = gen.adapter_top(f_q)
    z_q_top, top_idx, (cb_t, cm_t) = gen.quantize_top(z_e_top)
    bottom_in = assemble_bottom_latent(f_v_local, f_t_cls)
    z_e_bot = gen.adapter_bot(bottom_in)
    cond = gen.condition_bottom(z_e_bot, z_q_top)
    z_q_bot, bot_idx, (cb_b, cm_b) = quantize(cond, gen.book_bot)
    recon = gen.decode(z_q_top, z_q_bot)
    err = ad.sub(recon, images)
    mse = ad.mean(ad.mul(err, err))
    loss = ad.add(mse, ad.add(ad.add(cb_t, ad.mul(cm_t, cfg.beta1)),
                              ad.add(cb_b, ad.mul(cm_b, cfg.beta2))))
    maps = LatentMaps(z_e_top.data.copy(), z_q_top.data.copy(), top_idx,
                      cond.data.copy(), z_q_bot.data.copy(), bot_idx)
    return loss, maps
