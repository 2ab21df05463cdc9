"""Numpy reference kernels for same-padded 2-D convolution on (H, W, C) grids.

Used when the compiled extension is unavailable, and as the oracle the
compiled kernels are tested against.
"""
import numpy as np


def _offsets(k, H, W):
    # offsets whose receptive window can overlap the grid at all
    p = k // 2
    rows = [a for a in range(k) if abs(a - p) < H]
    cols = [b for b in range(k) if abs(b - p) < W]
    return p, rows, cols


def _padded(x, p):
    H, W, C = x.shape
    xp = np.zeros((H + 2 * p, W + 2 * p, C), dtype=np.float64)
    xp[p:p + H, p:p + W] = x
    return xp


def dwconv_forward(x, w, b):
    H, W, C = x.shape
    k = w.shape[0]
    p, rows, cols = _offsets(k, H, W)
    xp = _padded(x, p)
    out = np.empty((H, W, C), dtype=np.float64)
    out[...] = b
    for a in rows:
        for c in cols:
            out += xp[a:a + H, c:c + W] * w[a, c]
    return out


def dwconv_backward(x, w, g):
    H, W, C = x.shape
    k = w.shape[0]
    p, rows, cols = _offsets(k, H, W)
    xp = _padded(x, p)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for a in rows:
        for c in cols:
            gxp[a:a + H, c:c + W] += g * w[a, c]
            gw[a, c] = np.einsum("ijc,ijc->c", g, xp[a:a + H, c:c + W])
    gb = g.sum(axis=(0, 1))
    return gxp[p:p + H, p:p + W].copy(), gw, gb


def conv_forward(x, w, b):
    H, W, C = x.shape
    k = w.shape[0]
    p, rows, cols = _offsets(k, H, W)
    xp = _padded(x, p)
    out = np.empty((H, W, w.shape[3]), dtype=np.float64)
    out[...] = b
    for a in rows:
        for c in cols:
            out += xp[a:a + H, c:c + W] @ w[a, c]
    return out


def conv_backward(x, w, g):
    H, W, C = x.shape
    k = w.shape[0]
    p, rows, cols = _offsets(k, H, W)
    xp = _padded(x, p)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    g2 = g.reshape(H * W, -1)
    for a in rows:
        for c in cols:
            gxp[a:a + H, c:c + W] += g @ w[a, c].T
            gw[a, c] = xp[a:a + H, c:c + W].reshape(H * W, C).T @ g2
    gb = g.sum(axis=(0, 1))
    return gxp[p:p + H, p:p + W].copy(), gw, gb
