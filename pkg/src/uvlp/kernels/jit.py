"""Numba-jitted hot kernels.

Loop structure mirrors kernels.reference so the two paths agree bit-for-bit
wherever accumulation order matters (col2im sums in the same (kh, kw) order).
Parallelism is over independent batch/output slices only, keeping results
deterministic across runs and thread counts.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def nearest_code(z, codebook):
    m, d = z.shape
    k = codebook.shape[0]
    out = np.empty(m, dtype=np.int64)
    for i in prange(m):
        best = 0
        best_dist = np.inf
        for j in range(k):
            dist = 0.0
            for t in range(d):
                diff = z[i, t] - codebook[j, t]
                dist += diff * diff
            if dist < best_dist:
                best_dist = dist
                best = j
        out[i] = best
    return out


@njit(cache=True)
def gelu_forward(x):
    c = math.sqrt(2.0 / math.pi)
    n = x.size
    y = np.empty(n)
    t = np.empty(n)
    for i in range(n):
        xi = x[i]
        ti = math.tanh(c * (xi + 0.044715 * (xi * xi * xi)))
        t[i] = ti
        y[i] = 0.5 * xi * (1.0 + ti)
    return y, t


@njit(cache=True)
def gelu_backward(x, t, g):
    c = math.sqrt(2.0 / math.pi)
    n = x.size
    out = np.empty(n)
    for i in range(n):
        xi = x[i]
        ti = t[i]
        sech2 = 1.0 - ti * ti
        dinner = c * (1.0 + 0.134145 * (xi * xi))
        out[i] = g[i] * (0.5 * (1.0 + ti) + 0.5 * xi * sech2 * dinner)
    return out


@njit(cache=True)
def ln_forward(x, gain, bias, eps):
    r, d = x.shape
    out = np.empty((r, d))
    xhat = np.empty((r, d))
    inv = np.empty(r)
    for i in range(r):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        mu = s / d
        v = 0.0
        for j in range(d):
            c = x[i, j] - mu
            v += c * c
        iv = 1.0 / math.sqrt(v / d + eps)
        inv[i] = iv
        for j in range(d):
            h = (x[i, j] - mu) * iv
            xhat[i, j] = h
            out[i, j] = h * gain[j] + bias[j]
    return out, xhat, inv


@njit(cache=True)
def ln_backward_x(g, gain, xhat, inv):
    r, d = g.shape
    gx = np.empty((r, d))
    for i in range(r):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            gh = g[i, j] * gain[j]
            m1 += gh
            m2 += gh * xhat[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            gh = g[i, j] * gain[j]
            gx[i, j] = inv[i] * (gh - m1 - xhat[i, j] * m2)
    return gx


@njit(cache=True)
def softmax_rows(x):
    r, d = x.shape
    out = np.empty((r, d))
    for i in range(r):
        m = -np.inf
        for j in range(d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            e = math.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        for j in range(d):
            out[i, j] /= s
    return out


@njit(cache=True)
def softmax_backward_rows(p, g):
    r, d = p.shape
    gx = np.empty((r, d))
    for i in range(r):
        dot = 0.0
        for j in range(d):
            dot += g[i, j] * p[i, j]
        for j in range(d):
            gx[i, j] = p[i, j] * (g[i, j] - dot)
    return gx


@njit(cache=True)
def scatter_add_rows(table, idx, g):
    m, d = g.shape
    for i in range(m):
        r = idx[i]
        for j in range(d):
            table[r, j] += g[i, j]
    return table


@njit(cache=True, parallel=True)
def im2col(xp, kh, kw, sh, sw):
    b, c, hp, wp = xp.shape
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    cols = np.empty((b, c * kh * kw, oh * ow), dtype=xp.dtype)
    for bi in prange(b):
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = ci * kh * kw + i * kw + j
                    for oi in range(oh):
                        for oj in range(ow):
                            cols[bi, row, oi * ow + oj] = xp[bi, ci, oi * sh + i, oj * sw + j]
    return cols


@njit(cache=True, parallel=True)
def col2im(cols, b, c, hp, wp, kh, kw, sh, sw):
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for bi in prange(b):
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = ci * kh * kw + i * kw + j
                    for oi in range(oh):
                        for oj in range(ow):
                            out[bi, ci, oi * sh + i, oj * sw + j] += cols[bi, row, oi * ow + oj]
    return out
