"""Pure-numpy reference implementations of the hot kernels.

These are the fallback path when numba is unavailable or disabled via
``UVLP_NUMBA=0``, and the ground truth the jitted versions are tested against.
"""

from __future__ import annotations

import math

import numpy as np


def gelu_forward(x: np.ndarray):
    """tanh-form gelu. Returns (y, tanh_inner); the tanh is reused by backward.

    Expression structure matches the jitted loop so both paths agree bitwise.
    """
    c = math.sqrt(2.0 / math.pi)
    t = np.tanh(c * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(x: np.ndarray, t: np.ndarray, g: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    sech2 = 1.0 - t * t
    dinner = c * (1.0 + 0.134145 * (x * x))
    return g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner)


def ln_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Row-wise layer norm on (R, D). Returns (out, xhat, inv_std)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv[:, 0]


def ln_backward_x(g: np.ndarray, gain: np.ndarray, xhat: np.ndarray,
                  inv: np.ndarray) -> np.ndarray:
    gh = g * gain
    return inv[:, None] * (
        gh
        - gh.mean(axis=-1, keepdims=True)
        - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
    )


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Stable row softmax on (R, D); -inf entries yield exactly-zero weights."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward_rows(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def scatter_add_rows(table: np.ndarray, idx: np.ndarray, g: np.ndarray) -> np.ndarray:
    """table[idx[i]] += g[i] with repeated-index accumulation."""
    np.add.at(table, idx, g)
    return table


def nearest_code(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook row per input row, squared-L2 metric.

    Ties resolve to the lowest index (np.argmin picks the first minimum).
    z: (M, d), codebook: (K, d) -> (M,) int64.
    """
    diff = z[:, None, :] - codebook[None, :, :]
    dist = np.einsum("mkd,mkd->mk", diff, diff)
    return np.argmin(dist, axis=1).astype(np.int64)


def im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Extract sliding patches from a padded batch.

    xp: (B, C, Hp, Wp) -> (B, C*kh*kw, OH*OW), column k holds the receptive
    field of output pixel k flattened in (C, kh, kw) order.
    """
    b, c, hp, wp = xp.shape
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw, :, :]  # (B, C, OH, OW, kh, kw)
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(
    cols: np.ndarray,
    out_shape: tuple,
    kh: int,
    kw: int,
    sh: int,
    sw: int,
) -> np.ndarray:
    """Scatter-add columns back onto the (padded) image grid; inverse of im2col
    up to overlap accumulation. cols: (B, C*kh*kw, OH*OW) -> out_shape (B,C,Hp,Wp).
    """
    b, c, hp, wp = out_shape
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    out = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + oh * sh : sh, j : j + ow * sw : sw] += cols[:, :, i, j]
    return out
