"""Thickness read from the reverse displacement at the grey/white interface."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .volume import GridMeta, as_array


def extract_gwi(wm, gm, wm_threshold: float = 0.5, gm_threshold: float = 0.5) -> np.ndarray:
    """Boolean mask of white-matter voxels with a 6-connected grey-matter neighbour."""
    wm = np.asarray(as_array(wm))
    gm = np.asarray(as_array(gm))
    if wm.shape != gm.shape:
        raise ValueError(f"dimension mismatch: {wm.shape} vs {gm.shape}")
    for name, t in (("wm_threshold", wm_threshold), ("gm_threshold", gm_threshold)):
        if not 0 < t < 1:
            raise ValueError(f"{name} must lie in (0, 1), got {t}")
    is_wm = wm >= wm_threshold
    is_gm = gm >= gm_threshold
    near_gm = np.zeros_like(is_gm)
    for ax in range(3):
        lead = [slice(None)] * 3
        trail = [slice(None)] * 3
        lead[ax] = slice(1, None)
        trail[ax] = slice(None, -1)
        near_gm[tuple(trail)] |= is_gm[tuple(lead)]
        near_gm[tuple(lead)] |= is_gm[tuple(trail)]
    return is_wm & near_gm


def gm_from_wmgm(wm, wmgm) -> np.ndarray:
    return np.clip(np.asarray(as_array(wmgm), dtype=np.float64) - np.asarray(as_array(wm), dtype=np.float64), 0, 1)


def thickness_map(phi_neg, mask, meta: GridMeta) -> np.ndarray:
    """Millimetre length of the reverse displacement on ``mask``; zero elsewhere."""
    u = np.asarray(as_array(phi_neg), dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if u.shape != tuple(meta.dims) + (3,) or mask.shape != tuple(meta.dims):
        raise ValueError(f"dimension mismatch: field {u.shape}, mask {mask.shape}, dims {meta.dims}")
    mm = u * np.asarray(meta.spacing_mm)
    return np.where(mask, np.sqrt(np.sum(mm * mm, axis=-1)), 0.0)


@dataclass
class RegionStats:
    label: int
    mean_mm: float
    std_mm: float
    count: int


@dataclass
class ThicknessReport:
    values_mm: np.ndarray          # thickness at each interface voxel
    global_mean_mm: float
    global_std_mm: float
    count: int
    regions: list[RegionStats] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "mean_mm", "std_mm", "count"])
        for r in self.regions:
            writer.writerow([r.label, repr(r.mean_mm), repr(r.std_mm), r.count])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "global": {"mean_mm": self.global_mean_mm, "std_mm": self.global_std_mm, "count": self.count},
            "regions": [{"label": r.label, "mean_mm": r.mean_mm, "std_mm": r.std_mm, "count": r.count}
                        for r in self.regions],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _stats(values: np.ndarray):
    if values.size == 0:
        return float("nan"), float("nan")
    return float(np.mean(values)), float(np.std(values))


def regional_thickness(thickness, mask, parcellation=None) -> ThicknessReport:
    """Global and per-label statistics over the interface voxels.

    Label 0 counts towards the global statistics but gets no table row.
    """
    thickness = np.asarray(thickness, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    labels = np.ones(mask.shape, dtype=np.int64) if parcellation is None else np.asarray(as_array(parcellation))
    if thickness.shape != mask.shape or labels.shape != mask.shape:
        raise ValueError(f"dimension mismatch: thickness {thickness.shape}, mask {mask.shape}, labels {labels.shape}")
    values = thickness[mask]
    on_gwi = labels[mask]
    mean, std = _stats(values)
    regions = []
    for label in np.unique(on_gwi):
        if label == 0:
            continue
        sel = values[on_gwi == label]
        m, s = _stats(sel)
        regions.append(RegionStats(int(label), m, s, int(sel.size)))
    return ThicknessReport(values, mean, std, int(values.size), regions)


def thickness_report(result, wm, wmgm, meta: GridMeta, parcellation=None,
                     wm_threshold: float = 0.5, gm_threshold: float = 0.5) -> ThicknessReport:
    """Interface extraction, thickness and regional table from a registration result."""
    mask = extract_gwi(wm, gm_from_wmgm(wm, wmgm), wm_threshold, gm_threshold)
    return regional_thickness(thickness_map(result.phi_reverse, mask, meta), mask, parcellation)
