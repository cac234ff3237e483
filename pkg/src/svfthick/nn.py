"""Channels-last 3D layers with explicit backward passes.

Activations are ``(batch, x, y, z, channels)``. Convolution kernels are
``(out, in, k, k, k)`` with zero padding ``k // 2``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_COL_BYTES = 64 << 20


def _out_size(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    k = w.shape[2]
    pad = k // 2
    bsz, nx, ny, nz, cin = x.shape
    if w.shape[1] != cin:
        raise ValueError(f"kernel expects {w.shape[1]} input channels, got {cin}")
    ox, oy, oz = (_out_size(n, stride) for n in (nx, ny, nz))
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0))) if pad else x
    windows = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    windows = windows[:, :ox, :oy, :oz]
    ncol = cin * k ** 3
    wmat = w.transpose(1, 2, 3, 4, 0).reshape(ncol, -1)
    out = np.empty((bsz, ox, oy, oz, w.shape[0]))
    # im2col a few x-planes at a time to bound the column buffer
    step = max(1, _COL_BYTES // (8 * bsz * oy * oz * ncol))
    for s in range(0, ox, step):
        cols = windows[:, s:s + step].reshape(-1, ncol)
        out[:, s:s + step] = (cols @ wmat).reshape(bsz, -1, oy, oz, w.shape[0])
    return out + b


def conv3d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray, stride: int = 1):
    """Gradients ``(g_x, g_w, g_b)`` of ``sum(g * conv3d(x, w, b, stride))``."""
    k = w.shape[2]
    pad = k // 2
    _, ox, oy, oz, cout = g.shape
    cin = x.shape[-1]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0))) if pad else x
    g_xp = np.zeros_like(xp)
    g_w = np.zeros_like(w)
    g_flat = g.reshape(-1, cout)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                sl = (slice(None),
                      slice(i, i + stride * (ox - 1) + 1, stride),
                      slice(j, j + stride * (oy - 1) + 1, stride),
                      slice(l, l + stride * (oz - 1) + 1, stride),
                      slice(None))
                g_w[:, :, i, j, l] = g_flat.T @ xp[sl].reshape(-1, cin)
                g_xp[sl] += g @ w[:, :, i, j, l]
    g_x = g_xp[:, pad:pad + x.shape[1], pad:pad + x.shape[2], pad:pad + x.shape[3], :] if pad else g_xp
    return g_x, g_w, g.sum(axis=(0, 1, 2, 3))


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, g: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, g, slope * g)


def upsample2(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling of the three spatial axes."""
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(g: np.ndarray) -> np.ndarray:
    b, nx, ny, nz, c = g.shape
    return g.reshape(b, nx // 2, 2, ny // 2, 2, nz // 2, 2, c).sum(axis=(2, 4, 6))
