"""Finite-difference gradient verification.

Central differences at float64 against the analytic gradients produced by
``backward()``. Used by the test suite to certify every differentiable op and
the composite losses end to end.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def numeric_grad(fn, params: list[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``fn()`` w.r.t. each param's data."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = float(fn().data)
            flat[i] = old - eps
            fm = float(fn().data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_error(fn, params: list[Tensor], eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst per-parameter relative error between analytic and numeric grads.

    For each parameter the max absolute discrepancy is normalized by the
    gradient's own scale: ||a - n||_inf / max(||a||_inf, ||n||_inf, floor).
    Central differences carry irreducible rounding noise of roughly
    |f|*machine_eps/(2*eps), so entries far below the gradient scale cannot be
    certified elementwise; a formula-level bug perturbs entries at the scale of
    the gradient itself and is caught by this ratio.
    """
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = numeric_grad(fn, params, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), floor)
        worst = max(worst, float(np.max(np.abs(a - n))) / scale)
    return worst
