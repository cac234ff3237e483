"""Spatial transformer on voxel grids with exact reverse-mode adjoints.

Displacements follow the pull convention: ``out(x) = m(x + u(x))``. Sampling
is trilinear with clamped (replicated-edge) coordinates, so the derivative of
a sample with respect to a coordinate that lies outside the grid is zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .volume import as_array


class TapeMismatchError(ValueError):
    """The tape passed to an adjoint does not belong to the given inputs."""


@dataclass
class WarpTape:
    """Sampling state cached by a forward warp for its adjoint."""

    disp: np.ndarray       # displacement the tape was built from, (nx, ny, nz, 3)
    lo: np.ndarray         # (N, 3) lower cell corner per sample
    frac: np.ndarray       # (N, 3) fractional offset inside the cell
    inside: np.ndarray     # (N, 3) coordinate was not clamped

    @property
    def shape(self):
        return self.disp.shape[:3]

    def check(self, disp: np.ndarray):
        if disp.shape != self.disp.shape or not np.array_equal(disp, self.disp):
            raise TapeMismatchError("tape was recorded for a different displacement field")


def identity_grid(shape) -> np.ndarray:
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij"), axis=-1)


@njit(cache=True)
def _locate(disp, nx, ny, nz):
    n = disp.shape[0]
    lo = np.empty((n, 3), dtype=np.int64)
    frac = np.empty((n, 3))
    inside = np.empty((n, 3), dtype=np.bool_)
    dims = (nx, ny, nz)
    p = 0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                base = (i, j, k)
                for d in range(3):
                    size = dims[d]
                    c = base[d] + disp[p, d]
                    inside[p, d] = c >= 0.0 and c <= size - 1.0
                    if c < 0.0:
                        c = 0.0
                    elif c > size - 1.0:
                        c = size - 1.0
                    l = int(np.floor(c))
                    if l > size - 2:
                        l = max(size - 2, 0)
                    lo[p, d] = l
                    frac[p, d] = c - l
                p += 1
    return lo, frac, inside


@njit(cache=True)
def _gather(lo, frac, flat, nx, ny, nz):
    n, nc = lo.shape[0], flat.shape[1]
    out = np.zeros((n, nc))
    for p in range(n):
        x0, y0, z0 = lo[p, 0], lo[p, 1], lo[p, 2]
        fx, fy, fz = frac[p, 0], frac[p, 1], frac[p, 2]
        x1 = min(x0 + 1, nx - 1)
        y1 = min(y0 + 1, ny - 1)
        z1 = min(z0 + 1, nz - 1)
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            xi = x1 if dx else x0
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                yi = y1 if dy else y0
                for dz in range(2):
                    w = wx * wy * (fz if dz else 1.0 - fz)
                    zi = z1 if dz else z0
                    q = (xi * ny + yi) * nz + zi
                    for c in range(nc):
                        out[p, c] += w * flat[q, c]
    return out


@njit(cache=True)
def _scatter(lo, frac, g, nx, ny, nz):
    n, nc = lo.shape[0], g.shape[1]
    out = np.zeros((nx * ny * nz, nc))
    for p in range(n):
        x0, y0, z0 = lo[p, 0], lo[p, 1], lo[p, 2]
        fx, fy, fz = frac[p, 0], frac[p, 1], frac[p, 2]
        x1 = min(x0 + 1, nx - 1)
        y1 = min(y0 + 1, ny - 1)
        z1 = min(z0 + 1, nz - 1)
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            xi = x1 if dx else x0
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                yi = y1 if dy else y0
                for dz in range(2):
                    w = wx * wy * (fz if dz else 1.0 - fz)
                    zi = z1 if dz else z0
                    q = (xi * ny + yi) * nz + zi
                    for c in range(nc):
                        out[q, c] += w * g[p, c]
    return out


@njit(cache=True)
def _coord_grad(lo, frac, inside, flat, g, nx, ny, nz):
    """d/dcoord of sum(g * sample(flat)), shape (N, 3)."""
    n, nc = lo.shape[0], flat.shape[1]
    out = np.zeros((n, 3))
    for p in range(n):
        x0, y0, z0 = lo[p, 0], lo[p, 1], lo[p, 2]
        fx, fy, fz = frac[p, 0], frac[p, 1], frac[p, 2]
        x1 = min(x0 + 1, nx - 1)
        y1 = min(y0 + 1, ny - 1)
        z1 = min(z0 + 1, nz - 1)
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            sx = 1.0 if dx else -1.0
            xi = x1 if dx else x0
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                sy = 1.0 if dy else -1.0
                yi = y1 if dy else y0
                for dz in range(2):
                    wz = fz if dz else 1.0 - fz
                    sz = 1.0 if dz else -1.0
                    zi = z1 if dz else z0
                    q = (xi * ny + yi) * nz + zi
                    v = 0.0
                    for c in range(nc):
                        v += flat[q, c] * g[p, c]
                    gx += sx * wy * wz * v
                    gy += wx * sy * wz * v
                    gz += wx * wy * sz * v
        out[p, 0] = gx if inside[p, 0] else 0.0
        out[p, 1] = gy if inside[p, 1] else 0.0
        out[p, 2] = gz if inside[p, 2] else 0.0
    return out


def _record(disp: np.ndarray) -> WarpTape:
    nx, ny, nz = disp.shape[:3]
    lo, frac, inside = _locate(np.ascontiguousarray(disp.reshape(-1, 3)), nx, ny, nz)
    return WarpTape(disp, lo, frac, inside)


def _sample(tape: WarpTape, data: np.ndarray) -> np.ndarray:
    nx, ny, nz = tape.shape
    flat = np.ascontiguousarray(data.reshape(nx * ny * nz, -1))
    return _gather(tape.lo, tape.frac, flat, nx, ny, nz)


def _spread(tape: WarpTape, g: np.ndarray) -> np.ndarray:
    nx, ny, nz = tape.shape
    return _scatter(tape.lo, tape.frac, np.ascontiguousarray(g.reshape(nx * ny * nz, -1)), nx, ny, nz)


def _dcoord(tape: WarpTape, data: np.ndarray, g: np.ndarray) -> np.ndarray:
    nx, ny, nz = tape.shape
    n = nx * ny * nz
    return _coord_grad(tape.lo, tape.frac, tape.inside,
                       np.ascontiguousarray(data.reshape(n, -1)),
                       np.ascontiguousarray(g.reshape(n, -1)), nx, ny, nz)


def _check_pair(m: np.ndarray, u: np.ndarray):
    if u.ndim != 4 or u.shape[3] != 3:
        raise ValueError(f"displacement must have shape (nx, ny, nz, 3), got {u.shape}")
    if m.shape[:3] != u.shape[:3]:
        raise ValueError(f"dimension mismatch: {m.shape[:3]} vs {u.shape[:3]}")


def warp_scalar(m, u):
    """Resample ``m`` at ``x + u(x)``. Returns ``(warped, tape)``."""
    m = np.asarray(as_array(m), dtype=np.float64)
    u = np.asarray(as_array(u), dtype=np.float64)
    _check_pair(m, u)
    tape = _record(u)
    return _sample(tape, m).reshape(m.shape), tape


def warp_scalar_adjoint(tape: WarpTape, m, u, g_out):
    """Gradients of ``sum(g_out * warp_scalar(m, u))`` with respect to ``m`` and ``u``."""
    m = np.asarray(as_array(m), dtype=np.float64)
    u = np.asarray(as_array(u), dtype=np.float64)
    g_out = np.asarray(as_array(g_out), dtype=np.float64)
    _check_pair(m, u)
    tape.check(u)
    if g_out.shape != m.shape:
        raise TapeMismatchError(f"output gradient shape {g_out.shape} does not match {m.shape}")
    g_m = _spread(tape, g_out).reshape(m.shape)
    g_u = _dcoord(tape, m, g_out).reshape(u.shape)
    return g_m, g_u


def warp_vector(a, u):
    """Component-wise resampling of a vector field. Returns ``(warped, tape)``."""
    a = np.asarray(as_array(a), dtype=np.float64)
    u = np.asarray(as_array(u), dtype=np.float64)
    _check_pair(a, u)
    tape = _record(u)
    return _sample(tape, a).reshape(a.shape), tape


def compose_displacements(a, b):
    """Displacement of ``x -> x + a(x)`` applied after ``x -> x + b(x)``.

    ``result(x) = b(x) + a(x + b(x))``. Returns ``(result, tape)``.
    """
    b = np.asarray(as_array(b), dtype=np.float64)
    sampled, tape = warp_vector(a, b)
    return b + sampled, tape


def compose_adjoint(tape: WarpTape, a, b, g_out):
    """Gradients of ``sum(g_out * compose_displacements(a, b))`` w.r.t. ``a`` and ``b``."""
    a = np.asarray(as_array(a), dtype=np.float64)
    b = np.asarray(as_array(b), dtype=np.float64)
    _check_pair(a, b)
    tape.check(b)
    g_out = np.asarray(g_out, dtype=np.float64)
    if g_out.shape != a.shape:
        raise TapeMismatchError(f"output gradient shape {g_out.shape} does not match {a.shape}")
    g_a = _spread(tape, g_out).reshape(a.shape)
    g_b = g_out + _dcoord(tape, a, g_out).reshape(b.shape)
    return g_a, g_b
