"""JIT-compiled elementwise kernels for the transformer hot path.

All kernels run sequential IEEE-strict float64 loops (fastmath off), so
results are deterministic and summation order is fixed. Inputs are 2-D
contiguous views; callers reshape.
"""
from __future__ import annotations

import numba
import numpy as np

_JIT = dict(cache=True, fastmath=False)


@numba.njit(**_JIT)
def ln_forward_2d(x, g, b, eps):
    rows, d = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(rows)
    for r in range(rows):
        mu = 0.0
        for j in range(d):
            mu += x[r, j]
        mu /= d
        var = 0.0
        for j in range(d):
            t = x[r, j] - mu
            var += t * t
        var /= d
        iv = 1.0 / np.sqrt(var + eps)
        inv[r] = iv
        for j in range(d):
            xh = (x[r, j] - mu) * iv
            xhat[r, j] = xh
            out[r, j] = g[j] * xh + b[j]
    return out, xhat, inv


@numba.njit(**_JIT)
def ln_backward_2d(dy, xhat, inv, g):
    rows, d = dy.shape
    dx = np.empty_like(dy)
    dg = np.zeros(d)
    db = np.zeros(d)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dyj = dy[r, j]
            xh = xhat[r, j]
            dg[j] += dyj * xh
            db[j] += dyj
            gdy = dyj * g[j]
            m1 += gdy
            m2 += gdy * xh
        m1 /= d
        m2 /= d
        iv = inv[r]
        for j in range(d):
            dx[r, j] = (dy[r, j] * g[j] - m1 - xhat[r, j] * m2) * iv
    return dx, dg, db


@numba.njit(**_JIT)
def softmax_forward_2d(s):
    rows, d = s.shape
    out = np.empty_like(s)
    for r in range(rows):
        mx = s[r, 0]
        for j in range(1, d):
            if s[r, j] > mx:
                mx = s[r, j]
        tot = 0.0
        for j in range(d):
            e = np.exp(s[r, j] - mx)
            out[r, j] = e
            tot += e
        for j in range(d):
            out[r, j] /= tot
    return out


@numba.njit(**_JIT)
def softmax_backward_2d(dattn, attn):
    rows, d = dattn.shape
    ds = np.empty_like(dattn)
    for r in range(rows):
        dot = 0.0
        for j in range(d):
            dot += dattn[r, j] * attn[r, j]
        for j in range(d):
            ds[r, j] = attn[r, j] * (dattn[r, j] - dot)
    return ds
