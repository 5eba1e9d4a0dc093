"""Numba-compiled inner loops for the denoiser hot path.

Single-threaded, fixed iteration order, fastmath off: results are
bit-reproducible run to run. Group statistics accumulate in float64
regardless of the array dtype because the pre-normalization activations
carry the raw timestep offset, which would otherwise cancel badly in
float32.
"""

from __future__ import annotations

import numba
import numpy as np

_JIT = dict(cache=True, fastmath=False, nogil=True)


@numba.njit(**_JIT)
def gn_forward(x, scale, shift, groups, eps):
    n, h = x.shape
    m = h // groups
    out = np.empty_like(x)
    y = np.empty_like(x)
    inv = np.empty((n, groups), dtype=x.dtype)
    for i in range(n):
        for g in range(groups):
            base = g * m
            mu = 0.0
            for j in range(m):
                mu += x[i, base + j]
            mu /= m
            var = 0.0
            for j in range(m):
                d = x[i, base + j] - mu
                var += d * d
            var /= m
            iv = 1.0 / np.sqrt(var + eps)
            inv[i, g] = iv
            for j in range(m):
                yy = (x[i, base + j] - mu) * iv
                y[i, base + j] = yy
                out[i, base + j] = yy * scale[base + j] + shift[base + j]
    return out, y, inv


@numba.njit(**_JIT)
def gn_backward(dout, y, inv, scale, groups):
    n, h = dout.shape
    m = h // groups
    dx = np.empty_like(dout)
    dscale = np.zeros(h, dtype=dout.dtype)
    dshift = np.zeros(h, dtype=dout.dtype)
    for i in range(n):
        for g in range(groups):
            base = g * m
            mean_dy = 0.0
            mean_dyy = 0.0
            for j in range(m):
                dy = dout[i, base + j] * scale[base + j]
                mean_dy += dy
                mean_dyy += dy * y[i, base + j]
            mean_dy /= m
            mean_dyy /= m
            iv = inv[i, g]
            for j in range(m):
                c = base + j
                dy = dout[i, c] * scale[c]
                dx[i, c] = iv * (dy - mean_dy - y[i, c] * mean_dyy)
                dscale[c] += dout[i, c] * y[i, c]
                dshift[c] += dout[i, c]
    return dx, dscale, dshift
