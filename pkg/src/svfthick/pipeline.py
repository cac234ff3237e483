"""Cohort-level plumbing shared by the command line: manifests, batch runs, reports."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import DegenerateDataError, icc_2_1, pearson_r, r_squared
from .optim import IterativeConfig, register_iterative
from .regressor import infer_velocity, mean_global_thickness
from .thickness import thickness_report
from .volume import load_volume, store_volume

MANIFEST_FIELDS = ["subject", "atrophy_mm", "wm", "wmgm", "labels", "truth_mm"]
RESULT_FIELDS = ["subject", "atrophy_mm", "global_mean_mm", "global_std_mm", "count"]


@dataclass(frozen=True)
class ManifestRow:
    subject: str
    atrophy_mm: float
    wm: Path
    wmgm: Path
    labels: Path | None
    truth_mm: float | None


def write_cohort(entries, out_dir) -> Path:
    """Store every phantom of a cohort as MVOL files plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for e in entries:
        stem = f"{e.subject}_atr-{e.atrophy_mm:.4f}"
        files = {}
        for part, vol in (("wm", e.instance.wm), ("wmgm", e.instance.wmgm), ("labels", e.instance.labels)):
            files[part] = f"{stem}_{part}.mvol"
            store_volume(vol, out_dir / files[part])
        rows.append({"subject": e.subject, "atrophy_mm": repr(e.atrophy_mm), **files,
                     "truth_mm": repr(e.instance.truth_mm)})
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    base = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject", "atrophy_mm", "wm", "wmgm"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        rows = []
        for r in reader:
            labels = r.get("labels") or None
            truth = r.get("truth_mm") or None
            rows.append(ManifestRow(r["subject"], float(r["atrophy_mm"]), base / r["wm"], base / r["wmgm"],
                                    base / labels if labels else None, float(truth) if truth else None))
    return rows


def load_pair(row: ManifestRow):
    return load_volume(row.wm, "pv"), load_volume(row.wmgm, "pv")


def _measure(job):
    row, method, cfg, model, thresholds = job
    wm, wmgm = load_pair(row)
    if method == "iterative":
        result = register_iterative(wm, wmgm, cfg)
    else:
        result = infer_velocity(model, wm, wmgm, cfg.loss, cfg.image_sigma)
    labels = load_volume(row.labels, "label") if row.labels else None
    report = thickness_report(result, wm, wmgm, wm.meta, labels, *thresholds)
    return {"subject": row.subject, "atrophy_mm": row.atrophy_mm, "global_mean_mm": report.global_mean_mm,
            "global_std_mm": report.global_std_mm, "count": report.count}


def measure_cohort(rows, method: str = "iterative", cfg: IterativeConfig = IterativeConfig(), model=None,
                   thresholds=(0.5, 0.5), workers: int = 1) -> list[dict]:
    """Mean global thickness for every manifest row, in manifest order."""
    if method not in ("iterative", "amortized"):
        raise ValueError(f"unknown method {method!r}")
    if method == "amortized" and model is None:
        raise ValueError("amortized measurement needs a model")
    jobs = [(row, method, cfg, model, thresholds) for row in rows]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_measure, jobs))
    return [_measure(j) for j in jobs]


def write_results(results, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, RESULT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in results:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"subject": r["subject"], "atrophy_mm": float(r["atrophy_mm"]),
                 "global_mean_mm": float(r["global_mean_mm"]),
                 "global_std_mm": float(r.get("global_std_mm") or "nan"),
                 "count": int(r.get("count") or 0)} for r in csv.DictReader(fh)]


def atrophy_response(results):
    """Induced and measured atrophy of every follow-up, plus per-subject curves.

    Measured atrophy is the subject's baseline mean thickness (its lowest
    atrophy level) minus the follow-up mean thickness.
    """
    by_subject: dict = {}
    for r in results:
        by_subject.setdefault(r["subject"], []).append((r["atrophy_mm"], r["global_mean_mm"]))
    induced, measured, curves = [], [], {}
    for subject, items in by_subject.items():
        items.sort()
        base_level, base_mean = items[0]
        curve = [(lvl - base_level, base_mean - mean) for lvl, mean in items]
        curves[subject] = curve
        for lvl, meas in curve[1:]:
            induced.append(lvl)
            measured.append(meas)
    return np.array(induced), np.array(measured), curves


def monotone_fraction(curves) -> float:
    """Share of consecutive atrophy levels whose measured atrophy does not decrease."""
    steps = [b[1] >= a[1] for curve in curves.values() for a, b in zip(curve, curve[1:])]
    return float(np.mean(steps)) if steps else float("nan")


def _entry(metric, value, n, k):
    return {"metric": metric, "value": value, "n": int(n), "k": int(k)}


def evaluation_report(result_sets: dict) -> dict:
    """Sensitivity metrics per result set and agreement metrics between sets."""
    metrics = []
    names = list(result_sets)
    for name in names:
        induced, measured, curves = atrophy_response(result_sets[name])
        prefix = f"{name}." if len(names) > 1 else ""
        if induced.size >= 2 and np.ptp(induced) > 0:
            metrics.append(_entry(prefix + "r_squared", r_squared(induced, measured), induced.size, 2))
            metrics.append(_entry(prefix + "r_squared_identity", r_squared(induced, measured, "identity"),
                                  induced.size, 2))
            try:
                metrics.append(_entry(prefix + "pearson_r_atrophy", pearson_r(induced, measured), induced.size, 2))
            except DegenerateDataError:
                pass
            metrics.append(_entry(prefix + "monotone_fraction", monotone_fraction(curves), induced.size, 1))
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            key = lambda r: (r["subject"], r["atrophy_mm"])  # noqa: E731
            right = {key(r): r["global_mean_mm"] for r in result_sets[b]}
            pairs = [(r["global_mean_mm"], right[key(r)]) for r in result_sets[a] if key(r) in right]
            if len(pairs) < 2:
                continue
            table = np.array(pairs)
            for metric, fn in (("icc_2_1", lambda t: icc_2_1(t)), ("pearson_r", lambda t: pearson_r(t[:, 0], t[:, 1]))):
                try:
                    metrics.append(_entry(f"{metric}[{a},{b}]", fn(table), len(pairs), 2))
                except DegenerateDataError:
                    pass
    return {"metrics": metrics}


def benchmark(wm, wmgm, model, cfg: IterativeConfig = IterativeConfig()) -> dict:
    """Wall-clock time of iterative registration against single-pass inference."""
    t0 = time.perf_counter()
    iterative = register_iterative(wm, wmgm, cfg)
    t_iter = time.perf_counter() - t0
    t0 = time.perf_counter()
    amortized = infer_velocity(model, wm, wmgm, cfg.loss, cfg.image_sigma)
    t_amort = time.perf_counter() - t0
    return {
        "dims": list(np.shape(getattr(wm, "data", wm))),
        "iterative_seconds": t_iter,
        "iterative_iterations": iterative.iterations,
        "amortized_seconds": t_amort,
        "speedup": t_iter / t_amort,
        "iterative_mean_thickness_mm": mean_global_thickness(iterative, wm, wmgm),
        "amortized_mean_thickness_mm": mean_global_thickness(amortized, wm, wmgm),
    }
