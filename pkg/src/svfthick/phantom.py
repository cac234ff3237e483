"""Analytic cortical phantoms with known thickness and subvoxel atrophy.

Voxel ``i`` covers ``[i, i + 1) * spacing`` millimetres along each axis.
A slab phantom stacks white matter below ``wm_extent`` along x and a grey
band of thickness ``gm_thickness_mm - atrophy_mm`` on top of it. A shell
phantom is a white-matter ball of radius ``wm_extent`` wrapped in a grey
shell. Atrophy always moves the pial boundary, never the grey/white one.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .volume import GridMeta, LabelVolume, ScalarVolume

SLAB = "slab"
SHELL = "shell"
SHELL_SUPERSAMPLING = 4


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = SLAB
    dims: tuple = (32, 8, 8)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    wm_extent: float = 12.0           # slab: interface position (mm); shell: inner radius (mm)
    gm_thickness_mm: float = 3.0
    atrophy_mm: float = 0.0
    perturbation: tuple | None = None   # (amplitude_mm, wavelength_mm)
    offset_mm: tuple = (0.0, 0.0, 0.0)  # subvoxel placement of the interface

    def __post_init__(self):
        if self.kind not in (SLAB, SHELL):
            raise ValueError(f"kind must be {SLAB!r} or {SHELL!r}, got {self.kind!r}")
        GridMeta(self.dims, self.spacing_mm)
        if self.gm_thickness_mm <= 0 or self.atrophy_mm < 0:
            raise ValueError("gm_thickness_mm must be positive and atrophy_mm non-negative")
        if self.gm_thickness_mm - self.atrophy_mm <= 0:
            raise ValueError(f"atrophy {self.atrophy_mm} mm consumes the whole {self.gm_thickness_mm} mm band")
        if self.wm_extent <= 0:
            raise ValueError("wm_extent must be positive")
        if self.perturbation is not None:
            amp, wavelength = self.perturbation
            if amp < 0 or wavelength <= 0:
                raise ValueError("perturbation needs amplitude >= 0 and wavelength > 0")

    @property
    def effective_thickness_mm(self) -> float:
        return self.gm_thickness_mm - self.atrophy_mm


@dataclass(frozen=True)
class PhantomInstance:
    wm: ScalarVolume
    wmgm: ScalarVolume
    labels: LabelVolume
    truth_mm: float
    spec: PhantomSpec

    @property
    def gm(self) -> np.ndarray:
        return np.clip(self.wmgm.data - self.wm.data, 0.0, 1.0)


def _coverage(lo_edge, size, boundary):
    """Fraction of ``[lo_edge, lo_edge + size)`` lying below ``boundary``."""
    return np.clip((boundary - lo_edge) / size, 0.0, 1.0)


def _sample_points(spec: PhantomSpec, n_sub: int):
    """Sub-voxel sample centres in mm, shape (nx, ny, nz, n_sub**3) per axis."""
    axes = []
    offsets = (np.arange(n_sub) + 0.5) / n_sub
    for n, s in zip(spec.dims, spec.spacing_mm):
        axes.append(((np.arange(n)[:, None] + offsets[None, :]) * s))
    x, y, z = axes
    shape = tuple(spec.dims) + (n_sub, n_sub, n_sub)
    gx = np.broadcast_to(x[:, None, None, :, None, None], shape)
    gy = np.broadcast_to(y[None, :, None, None, :, None], shape)
    gz = np.broadcast_to(z[None, None, :, None, None, :], shape)
    return gx, gy, gz


def _perturb(spec: PhantomSpec, along):
    if spec.perturbation is None:
        return 0.0
    amp, wavelength = spec.perturbation
    return amp * np.sin(2 * np.pi * along / wavelength)


def _slab(spec: PhantomSpec):
    sx = spec.spacing_mm[0]
    gwi = spec.wm_extent + spec.offset_mm[0]
    pial = gwi + spec.effective_thickness_mm
    if spec.perturbation is None:
        lo = np.arange(spec.dims[0]) * sx
        wm = _coverage(lo, sx, gwi)
        wmgm = _coverage(lo, sx, pial)
        shape = tuple(spec.dims)
        return (np.broadcast_to(wm[:, None, None], shape).copy(),
                np.broadcast_to(wmgm[:, None, None], shape).copy())
    gx, gy, _ = _sample_points(spec, SHELL_SUPERSAMPLING)
    shift = _perturb(spec, gy + spec.offset_mm[1])
    wm = (gx < gwi + shift).mean(axis=(3, 4, 5))
    wmgm = (gx < pial + shift).mean(axis=(3, 4, 5))
    return wm, wmgm


def shell_center_mm(spec: PhantomSpec) -> np.ndarray:
    return np.array([n * s / 2 for n, s in zip(spec.dims, spec.spacing_mm)]) + np.asarray(spec.offset_mm)


def _shell(spec: PhantomSpec):
    cx, cy, cz = shell_center_mm(spec)
    gx, gy, gz = _sample_points(spec, SHELL_SUPERSAMPLING)
    r = np.sqrt((gx - cx) ** 2 + (gy - cy) ** 2 + (gz - cz) ** 2)
    inner = spec.wm_extent + _perturb(spec, spec.wm_extent * np.arctan2(gy - cy, gx - cx))
    wm = (r < inner).mean(axis=(3, 4, 5))
    wmgm = (r < inner + spec.effective_thickness_mm).mean(axis=(3, 4, 5))
    return wm, wmgm


def _labels(spec: PhantomSpec) -> np.ndarray:
    if spec.kind == SLAB:
        return np.ones(spec.dims, dtype=np.int32)
    centres = [(np.arange(n) + 0.5) * s for n, s in zip(spec.dims, spec.spacing_mm)]
    c = shell_center_mm(spec)
    bx, by, bz = [(ax >= c[i]).astype(np.int32) for i, ax in enumerate(centres)]
    return 1 + bx[:, None, None] + 2 * by[None, :, None] + 4 * bz[None, None, :]


def make_phantom(spec: PhantomSpec) -> PhantomInstance:
    wm, wmgm = _slab(spec) if spec.kind == SLAB else _shell(spec)
    meta = GridMeta(spec.dims, spec.spacing_mm)
    return PhantomInstance(
        wm=ScalarVolume(wm, meta),
        wmgm=ScalarVolume(wmgm, meta),
        labels=LabelVolume(_labels(spec), meta),
        truth_mm=spec.effective_thickness_mm,
        spec=spec,
    )


@dataclass(frozen=True)
class CohortEntry:
    subject: str
    atrophy_mm: float
    instance: PhantomInstance


def atrophy_levels_fine_and_coarse() -> list[float]:
    """Baseline, ten steps of 0.01 mm up to 0.1 mm, then nine of 0.1 mm up to 1 mm."""
    fine = [round(0.01 * i, 10) for i in range(1, 11)]
    coarse = [round(0.1 * i, 10) for i in range(2, 11)]
    return [0.0] + fine + coarse


def generate_cohort(base_specs, levels, seed: int = 0) -> list[CohortEntry]:
    """One instance per (subject, atrophy level).

    Each subject gets its own subvoxel interface placement drawn from ``seed``;
    the draw is shared by all of that subject's atrophy levels.
    """
    levels = [float(v) for v in levels]
    if not levels or any(v < 0 for v in levels) or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("atrophy levels must be non-negative and strictly increasing")
    rng = np.random.default_rng(seed)
    entries = []
    for i, base in enumerate(base_specs):
        if base.kind == SLAB:
            offset = (float(rng.uniform(0.0, base.spacing_mm[0])), 0.0, 0.0)
        else:
            offset = tuple(float(v) for v in rng.uniform(-0.5, 0.5, size=3) * np.asarray(base.spacing_mm))
        for level in levels:
            spec = dataclasses.replace(base, atrophy_mm=level, offset_mm=offset)
            entries.append(CohortEntry(f"sub-{i:03d}", level, make_phantom(spec)))
    return entries
