"""Scaling-and-squaring exponentiation of stationary velocity fields."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import as_array
from .warp import TapeMismatchError, WarpTape, compose_adjoint, compose_displacements


@dataclass(frozen=True)
class IntegrationConfig:
    steps: int = 7

    def __post_init__(self):
        if not isinstance(self.steps, (int, np.integer)) or not 1 <= self.steps <= 12:
            raise ValueError(f"steps must be an integer in [1, 12], got {self.steps!r}")


@dataclass
class SvfTape:
    steps: int
    shape: tuple
    fields: list = field(default_factory=list)   # u_0 .. u_{steps-1}
    tapes: list = field(default_factory=list)    # one WarpTape per squaring


def _velocity(z) -> np.ndarray:
    z = np.asarray(as_array(z), dtype=np.float64)
    if z.ndim != 4 or z.shape[3] != 3:
        raise ValueError(f"velocity field must have shape (nx, ny, nz, 3), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("velocity field contains non-finite values")
    return z


def integrate_svf(z, cfg: IntegrationConfig = IntegrationConfig()):
    """Displacement of exp(z). Returns ``(phi, tape)``."""
    z = _velocity(z)
    u = z / 2.0 ** cfg.steps
    tape = SvfTape(cfg.steps, z.shape)
    for _ in range(cfg.steps):
        nxt, t = compose_displacements(u, u)
        tape.fields.append(u)
        tape.tapes.append(t)
        u = nxt
    return u, tape


def integrate_svf_reverse(z, cfg: IntegrationConfig = IntegrationConfig()):
    """Displacement of exp(-z), i.e. the inverse flow."""
    return integrate_svf(-_velocity(z), cfg)


def svf_backward(tape: SvfTape, g_phi) -> np.ndarray:
    """Gradient with respect to the integrated velocity, given dL/dphi.

    For a tape from :func:`integrate_svf_reverse` the result is the gradient
    with respect to ``-z``; negate it to get the gradient with respect to ``z``.
    """
    g = np.asarray(as_array(g_phi), dtype=np.float64)
    if g.shape != tape.shape:
        raise TapeMismatchError(f"gradient shape {g.shape} does not match tape shape {tape.shape}")
    for u, t in zip(reversed(tape.fields), reversed(tape.tapes)):
        g_a, g_b = compose_adjoint(t, u, u, g)
        g = g_a + g_b
    return g / 2.0 ** tape.steps


def jacobian_determinant(phi) -> np.ndarray:
    """det(I + grad u) per voxel, central differences inside the grid.

    Face voxels use one-sided differences; callers wanting the interior only
    should slice ``[1:-1, 1:-1, 1:-1]``.
    """
    u = np.asarray(as_array(phi), dtype=np.float64)
    if u.ndim != 4 or u.shape[3] != 3 or min(u.shape[:3]) < 2:
        raise ValueError(f"need a (nx, ny, nz, 3) field with at least 2 voxels per axis, got {u.shape}")
    # jac[..., i, j] = d u_i / d x_j
    jac = np.stack([np.stack(np.gradient(u[..., i]), axis=-1) for i in range(3)], axis=-2)
    jac += np.eye(3)
    return np.linalg.det(jac)
