"""Bidirectional registration objective and its gradient.

    total = sim(wm, wmgm o phi_-z) + sim(wmgm, wm o phi_z) + lambda * smooth(z)

Both similarity terms and the smoothness penalty use mean reduction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .svf import IntegrationConfig, integrate_svf, integrate_svf_reverse, svf_backward
from .volume import as_array
from .warp import warp_scalar, warp_scalar_adjoint

LAMBDA_RANGE = (0.0, 0.05)
SIMILARITIES = ("mse", "l1")


@dataclass(frozen=True)
class LossConfig:
    similarity: str = "mse"
    lam: float = 0.02
    integration: IntegrationConfig = field(default_factory=IntegrationConfig)
    allow_any_lambda: bool = False

    def __post_init__(self):
        sim = self.similarity.lower()
        if sim not in SIMILARITIES:
            raise ValueError(f"similarity must be one of {SIMILARITIES}, got {self.similarity!r}")
        object.__setattr__(self, "similarity", sim)
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be a non-negative finite number, got {self.lam}")
        if not self.allow_any_lambda and not LAMBDA_RANGE[0] <= self.lam <= LAMBDA_RANGE[1]:
            raise ValueError(f"lambda {self.lam} outside {LAMBDA_RANGE}; set allow_any_lambda to override")


@dataclass(frozen=True)
class LossBreakdown:
    sim_forward: float
    sim_reverse: float
    smooth: float
    lam: float

    @property
    def total(self) -> float:
        return self.sim_forward + self.sim_reverse + self.lam * self.smooth

    def as_dict(self) -> dict:
        return {"sim_forward": self.sim_forward, "sim_reverse": self.sim_reverse,
                "smooth": self.smooth, "lambda": self.lam, "total": self.total}


def similarity(a, b, kind: str = "mse"):
    """Mean similarity between ``a`` and ``b`` and its gradient with respect to ``b``."""
    a = np.asarray(as_array(a), dtype=np.float64)
    b = np.asarray(as_array(b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = b - a
    n = diff.size
    if kind == "mse":
        return float(np.mean(diff * diff)), 2.0 * diff / n
    if kind == "l1":
        # sign(0) == 0 gives the zero subgradient at ties
        return float(np.mean(np.abs(diff))), np.sign(diff) / n
    raise ValueError(f"unknown similarity {kind!r}")


def smoothness(z):
    """Mean squared forward difference over all neighbour pairs and components."""
    z = np.asarray(as_array(z), dtype=np.float64)
    if z.ndim != 4 or min(z.shape[:3]) < 2:
        raise ValueError(f"smoothness needs at least 2 voxels per axis, got {z.shape}")
    diffs = [np.diff(z, axis=ax) for ax in range(3)]
    count = sum(d.size for d in diffs)
    value = sum(float(np.sum(d * d)) for d in diffs) / count
    grad = np.zeros_like(z)
    for ax, d in enumerate(diffs):
        g = 2.0 * d / count
        lead = [slice(None)] * 4
        trail = [slice(None)] * 4
        lead[ax] = slice(1, None)
        trail[ax] = slice(None, -1)
        grad[tuple(lead)] += g
        grad[tuple(trail)] -= g
    return value, grad


def registration_loss(wm, wmgm, z, cfg: LossConfig = LossConfig()):
    """Evaluate the objective and its full gradient with respect to ``z``.

    Returns ``(LossBreakdown, g_z)``.
    """
    wm = np.asarray(as_array(wm), dtype=np.float64)
    wmgm = np.asarray(as_array(wmgm), dtype=np.float64)
    z = np.asarray(as_array(z), dtype=np.float64)
    if wm.shape != wmgm.shape or z.shape != wm.shape + (3,):
        raise ValueError(f"shape mismatch: wm {wm.shape}, wmgm {wmgm.shape}, z {z.shape}")

    phi_fwd, tape_fwd = integrate_svf(z, cfg.integration)
    phi_rev, tape_rev = integrate_svf_reverse(z, cfg.integration)

    wm_warped, wt_fwd = warp_scalar(wm, phi_fwd)
    wmgm_warped, wt_rev = warp_scalar(wmgm, phi_rev)
    sim_fwd, g_wm_warped = similarity(wmgm, wm_warped, cfg.similarity)
    sim_rev, g_wmgm_warped = similarity(wm, wmgm_warped, cfg.similarity)
    smooth, g_smooth = smoothness(z)

    _, g_phi_fwd = warp_scalar_adjoint(wt_fwd, wm, phi_fwd, g_wm_warped)
    _, g_phi_rev = warp_scalar_adjoint(wt_rev, wmgm, phi_rev, g_wmgm_warped)
    g_z = svf_backward(tape_fwd, g_phi_fwd) - svf_backward(tape_rev, g_phi_rev) + cfg.lam * g_smooth

    return LossBreakdown(sim_fwd, sim_rev, smooth, cfg.lam), g_z
