"""Hot-kernel dispatch: numba-jitted loops with a pure-numpy fallback.

The backend is chosen once at import time. Set ``UVLP_NUMBA=0`` to force the
numpy path; by default the jitted path is used whenever numba imports cleanly.
``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

from . import reference

_FLAG = os.environ.get("UVLP_NUMBA", "1").strip().lower()
_WANT_NUMBA = _FLAG not in ("0", "false", "off", "no")

if _WANT_NUMBA:
    try:
        from . import jit as _impl

        BACKEND = "numba"
    except ImportError:
        _impl = reference
        BACKEND = "numpy"
else:
    _impl = reference
    BACKEND = "numpy"


def backend() -> str:
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return BACKEND


def ln_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Layer norm over the last axis of any-rank x; inv_std keeps a trailing 1-axis."""
    shp = x.shape
    x2 = np.ascontiguousarray(x.reshape(-1, shp[-1]))
    out, xhat, inv = _impl.ln_forward(x2, np.ascontiguousarray(gain),
                                      np.ascontiguousarray(bias), eps)
    return out.reshape(shp), xhat.reshape(shp), inv.reshape(shp[:-1] + (1,))


def ln_backward_x(g: np.ndarray, gain: np.ndarray, xhat: np.ndarray,
                  inv: np.ndarray) -> np.ndarray:
    shp = g.shape
    out = _impl.ln_backward_x(
        np.ascontiguousarray(g.reshape(-1, shp[-1])),
        np.ascontiguousarray(gain),
        xhat.reshape(-1, shp[-1]),
        inv.reshape(-1),
    )
    return out.reshape(shp)


def softmax_lastaxis(x: np.ndarray) -> np.ndarray:
    shp = x.shape
    out = _impl.softmax_rows(np.ascontiguousarray(x.reshape(-1, shp[-1])))
    return out.reshape(shp)


def softmax_backward_lastaxis(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    shp = p.shape
    out = _impl.softmax_backward_rows(
        p.reshape(-1, shp[-1]), np.ascontiguousarray(g.reshape(-1, shp[-1])))
    return out.reshape(shp)


def scatter_add_rows(table: np.ndarray, idx: np.ndarray, g: np.ndarray) -> np.ndarray:
    return _impl.scatter_add_rows(
        table, np.ascontiguousarray(idx.reshape(-1), dtype=np.int64),
        np.ascontiguousarray(g.reshape(-1, table.shape[-1])))


def gelu_forward(x: np.ndarray):
    if _impl is reference:
        return reference.gelu_forward(x)
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    y, t = _impl.gelu_forward(flat)
    return y.reshape(x.shape), t.reshape(x.shape)


def gelu_backward(x: np.ndarray, t: np.ndarray, g: np.ndarray) -> np.ndarray:
    if _impl is reference:
        return reference.gelu_backward(x, t, g)
    g = np.ascontiguousarray(g, dtype=np.float64)
    out = _impl.gelu_backward(x.reshape(-1), t.reshape(-1), g.reshape(-1))
    return out.reshape(x.shape)


def nearest_code(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    return _impl.nearest_code(
        np.ascontiguousarray(z, dtype=np.float64),
        np.ascontiguousarray(codebook, dtype=np.float64),
    )


def im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    return _impl.im2col(np.ascontiguousarray(xp), kh, kw, sh, sw)


def col2im(cols: np.ndarray, out_shape: tuple, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    cols = np.ascontiguousarray(cols)
    if _impl is reference:
        return reference.col2im(cols, out_shape, kh, kw, sh, sw)
    b, c, hp, wp = out_shape
    return _impl.col2im(cols, b, c, hp, wp, kh, kw, sh, sw)
