"""Neural-network building blocks on top of the autodiff core.

Modules hold their parameters as ``Tensor`` attributes; ``named_parameters``
walks the attribute tree and yields dotted names, which is what the optimizer,
checkpointing, and the weight-decay exclusion list key on. All initialization
draws from an explicit ``numpy.random.Generator`` so construction is
reproducible from a seed.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor


class Module:
    """Base class providing recursive parameter discovery."""

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(val, Tensor):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def freeze(self) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = False

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


def normal_param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    """Affine map ``x @ weight + bias`` acting on the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = normal_param(rng, (d_in, d_out), std)
        self.bias = zeros_param((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = ones_param((d,))
        self.bias = zeros_param((d,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = normal_param(rng, (n, d), std)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ad.embedding(self.weight, ids)


class MultiHeadSelfAttention(Module):
    """Masked multi-head self-attention; disallowed positions get exactly zero weight."""

    def __init__(self, d: int, num_heads: int, rng: np.random.Generator):
        if d % num_heads != 0:
            raise ValueError(f"hidden dim {d} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = d // num_heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def __call__(self, x: Tensor, allow: np.ndarray | None = None, record: list | None = None) -> Tensor:
        b, t, d = x.shape
        h, dh = self.num_heads, self.head_dim

        def split(v):
            return ad.transpose(ad.reshape(v, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = ad.mul(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(dh))
        if allow is not None:
            scores = ad.masked_fill(scores, ~allow[:, None, :, :], -np.inf)
        probs = ad.softmax(scores, axis=-1)
        if record is not None:
            record.append(probs.data.copy())
        out = ad.matmul(probs, v)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, d))
        return self.wo(out)


class CrossAttention(Module):
    """Multi-head attention from a query sequence onto an unmasked key/value bank."""

    def __init__(self, d: int, d_kv: int, num_heads: int, rng: np.random.Generator):
        self.num_heads = num_heads
        self.head_dim = d // num_heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d_kv, d, rng)
        self.wv = Linear(d_kv, d, rng)
        self.wo = Linear(d, d, rng)

    def __call__(self, xq: Tensor, kv: Tensor) -> Tensor:
        b, t, d = xq.shape
        s = kv.shape[1]
        h, dh = self.num_heads, self.head_dim
        q = ad.transpose(ad.reshape(self.wq(xq), (b, t, h, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(self.wk(kv), (b, s, h, dh)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(self.wv(kv), (b, s, h, dh)), (0, 2, 1, 3))
        scores = ad.mul(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(dh))
        probs = ad.softmax(scores, axis=-1)
        out = ad.matmul(probs, v)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, d))
        return self.wo(out)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, d: int, num_heads: int, rng: np.random.Generator, ffn_mult: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, num_heads, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult * d, rng)

    def __call__(self, x: Tensor, allow: np.ndarray | None = None, record: list | None = None) -> Tensor:
        x = ad.add(x, self.attn(self.ln1(x), allow, record))
        return ad.add(x, self.ffn(self.ln2(x)))


# -- convolution ops ------------------------------------------------------------


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution via im2col. x: (B,Cin,H,W), weight: (Cout,Cin,kh,kw)."""
    b, cin, hh, ww = x.shape
    cout, _, kh, kw = weight.shape
    xp = _pad_hw(x.data, pad)
    oh = (xp.shape[2] - kh) // stride + 1
    ow = (xp.shape[3] - kw) // stride + 1
    cols = kernels.im2col(xp, kh, kw, stride, stride)
    wf = weight.data.reshape(cout, -1)
    out_data = (wf @ cols).reshape(b, cout, oh, ow) + bias.data[:, None, None]

    def backward(g):
        gf = g.reshape(b, cout, oh * ow)
        if x.requires_grad or x._parents:
            gcols = np.swapaxes(wf, 0, 1) @ gf
            gxp = kernels.col2im(gcols, xp.shape, kh, kw, stride, stride)
            gx = gxp[:, :, pad : pad + hh, pad : pad + ww] if pad else gxp
            x._accum(np.ascontiguousarray(gx))
        gw = np.tensordot(gf, cols, axes=([0, 2], [0, 2]))
        weight._accum(gw.reshape(weight.shape))
        bias._accum(g.sum(axis=(0, 2, 3)))

    return Tensor._make(out_data, (x, weight, bias), backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int, pad: int = 0) -> Tensor:
    """Strided transposed convolution. x: (B,Cin,H,W), weight: (Cin,Cout,kh,kw)."""
    b, cin, hh, ww = x.shape
    _, cout, kh, kw = weight.shape
    oh = (hh - 1) * stride + kh - 2 * pad
    ow = (ww - 1) * stride + kw - 2 * pad
    xf = x.data.reshape(b, cin, hh * ww)
    wf = weight.data.reshape(cin, cout * kh * kw)
    cols = np.swapaxes(wf, 0, 1) @ xf
    full = kernels.col2im(cols, (b, cout, oh + 2 * pad, ow + 2 * pad), kh, kw, stride, stride)
    cropped = full[:, :, pad : pad + oh, pad : pad + ow] if pad else full
    out_data = cropped + bias.data[:, None, None]

    def backward(g):
        gpad = _pad_hw(g, pad)
        gcols = kernels.im2col(gpad, kh, kw, stride, stride)
        if x.requires_grad or x._parents:
            x._accum((wf @ gcols).reshape(x.shape))
        gw = np.tensordot(xf, gcols, axes=([0, 2], [0, 2]))
        weight._accum(gw.reshape(weight.shape))
        bias._accum(g.sum(axis=(0, 2, 3)))

    return Tensor._make(np.ascontiguousarray(out_data), (x, weight, bias), backward)


def nearest_upsample2d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling by an integer factor on both spatial axes."""
    b, c, hh, ww = x.shape
    out_data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        x._accum(g.reshape(b, c, hh, factor, ww, factor).sum(axis=(3, 5)))

    return Tensor._make(out_data, (x,), backward)


def _conv_std(cin: int, kh: int, kw: int) -> float:
    return math.sqrt(2.0 / (cin * kh * kw))


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, pad: int = 0):
        self.weight = normal_param(rng, (cout, cin, k, k), _conv_std(cin, k, k))
        self.bias = zeros_param((cout,))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, rng: np.random.Generator, pad: int = 0):
        self.weight = normal_param(rng, (cin, cout, k, k), _conv_std(cin, k, k))
        self.bias = zeros_param((cout,))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.pad)


class ResBlock2d(Module):
    """relu -> 3x3 conv -> relu -> 1x1 conv, added back onto the input."""

    def __init__(self, ch: int, hidden: int, rng: np.random.Generator):
        self.conv1 = Conv2d(ch, hidden, 3, rng, pad=1)
        self.conv2 = Conv2d(hidden, ch, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(ad.relu(x))
        h = self.conv2(ad.relu(h))
        return ad.add(x, h)
