"""Reverse-mode automatic differentiation over numpy arrays.

Everything trainable in this package runs through the small ``Tensor`` type
below: a float64 ndarray plus a closure that routes the output gradient back
to the tensors it was computed from. Gradients are accumulated into ``.grad``
by ``backward()`` in reverse topological order. The op set is intentionally
small; fused ops (softmax, layer_norm, conv2d, ...) exist where the composed
form would be slow or numerically fragile, and every backward formula is
checked against central finite differences in the test suite.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import kernels

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-only forwards)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._grad_owned = False

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        """Create a graph node; drops the tape when recording is off."""
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def _accum(self, g: np.ndarray) -> None:
        # First contribution borrows the caller's array (may alias another
        # node's grad or a view); allocate our own only when a second one
        # arrives, so borrowed storage is never mutated.
        if self.grad is None:
            self.grad = np.asarray(g, dtype=np.float64)
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient requires a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape).copy()
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- conveniences --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accum(_unbroadcast(g, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accum(_unbroadcast(-g, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data**p

    def backward(g):
        a._accum(g * p * a.data ** (p - 1))

    return Tensor._make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return Tensor._make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        a._accum(g / a.data)

    return Tensor._make(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out_data * out_data))

    return Tensor._make(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accum(g * (a.data > 0.0))

    return Tensor._make(out_data, (a,), backward)


def gelu(a) -> Tensor:
    """tanh-form gelu; smooth everywhere, which keeps finite-difference checks clean."""
    a = as_tensor(a)
    x = a.data
    out_data, t = kernels.gelu_forward(x)

    def backward(g):
        a._accum(kernels.gelu_backward(x, t, g))

    return Tensor._make(out_data, (a,), backward)


def stop_gradient(a) -> Tensor:
    """Forward identity; blocks all gradient flow."""
    a = as_tensor(a)
    return Tensor(a.data)


# -- reductions ---------------------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy())

    return Tensor._make(out_data, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def max_(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; ties route gradient to the first (lowest-index) maximum."""
    a = as_tensor(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)
    if axis is None:
        flat_idx = int(np.argmax(a.data))

        def backward(g):
            ga = np.zeros_like(a.data)
            ga.reshape(-1)[flat_idx] = np.asarray(g).reshape(-1)[0]
            a._accum(ga)

    else:
        idx = np.argmax(a.data, axis=axis)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            ga = np.zeros_like(a.data)
            np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis=axis)
            a._accum(ga)

    return Tensor._make(out_data, (a,), backward)


# -- shape manipulation ---------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accum(g.reshape(a.data.shape))

    return Tensor._make(out_data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out_data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accum(g.transpose(inv))

    return Tensor._make(out_data, (a,), backward)


def swap_last(a) -> Tensor:
    """Swap the final two axes (matmul transpose for stacked matrices)."""
    a = as_tensor(a)
    return transpose(a, tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out_data = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        a._accum(ga)

    return Tensor._make(np.ascontiguousarray(out_data), (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accum(g[tuple(sl)])

    return Tensor._make(out_data, tuple(tensors), backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = np.broadcast_to(a.data, shape).copy()

    def backward(g):
        a._accum(_unbroadcast(g, a.data.shape))

    return Tensor._make(out_data, (a,), backward)


# -- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad or b._parents:
            if b.data.ndim == 2 and g.ndim > 2:
                # one flat GEMM instead of a batched GEMM plus reduction
                k = a.data.shape[-1]
                b._accum(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def affine(x, w, b) -> Tensor:
    """x @ w + b in one graph node; w is (d_in, d_out), b is (d_out,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out_data = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad or x._parents:
            x._accum(g @ w.data.T)
        g2 = g.reshape(-1, g.shape[-1])
        if w.requires_grad or w._parents:
            w._accum(x.data.reshape(-1, x.data.shape[-1]).T @ g2)
        if b.requires_grad or b._parents:
            b._accum(g2.sum(axis=0))

    return Tensor._make(out_data, (x, w, b), backward)


# -- fused ops -------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax; -inf inputs yield exactly-zero probabilities."""
    a = as_tensor(a)
    if axis in (-1, a.data.ndim - 1):
        out_data = kernels.softmax_lastaxis(a.data)

        def backward(g):
            a._accum(kernels.softmax_backward_lastaxis(out_data, g))

        return Tensor._make(out_data, (a,), backward)

    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accum(out_data * (g - dot))

    return Tensor._make(out_data, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    p = np.exp(out_data)

    def backward(g):
        a._accum(g - p * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out_data, (a,), backward)


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Set positions where `mask` is True to `value`; those positions get zero grad."""
    a = as_tensor(a)
    mask = np.broadcast_to(mask, a.data.shape)
    out_data = np.where(mask, value, a.data)

    def backward(g):
        a._accum(np.where(mask, 0.0, g))

    return Tensor._make(out_data, (a,), backward)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row gather from `table` (V, d) at integer `ids` (...,) -> (..., d)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    out_data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        kernels.scatter_add_rows(gt, ids, g)
        table._accum(gt)

    return Tensor._make(out_data, (table,), backward)


def gather_last(a, idx: np.ndarray) -> Tensor:
    """Pick a[..., idx[...]] along the final axis; idx shape == a.shape[:-1]."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    expanded = np.expand_dims(idx, -1)
    out_data = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, expanded, np.expand_dims(g, -1), axis=-1)
        a._accum(ga)

    return Tensor._make(out_data, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the final axis with learned gain/bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    out_data, xhat, inv = kernels.ln_forward(x.data, gain.data, bias.data, eps)

    def backward(g):
        if x.requires_grad or x._parents:
            x._accum(kernels.ln_backward_x(g, gain.data, xhat, inv))
        reduce_axes = tuple(range(g.ndim - 1))
        if gain.requires_grad or gain._parents:
            gain._accum((g * xhat).sum(axis=reduce_axes))
        if bias.requires_grad or bias._parents:
            bias._accum(g.sum(axis=reduce_axes))

    return Tensor._make(out_data, (x, gain, bias), backward)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Unit-norm rows along `axis` (cosine-similarity preprocessing)."""
    sq = sum_(mul(a, a), axis=axis, keepdims=True)
    return div(a, power(add(sq, eps), 0.5))
