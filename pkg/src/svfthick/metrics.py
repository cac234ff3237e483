"""Agreement statistics: ICC(2,1), Pearson correlation and R^2."""

from __future__ import annotations

import numpy as np


class DegenerateDataError(ValueError):
    """Raised when a statistic is undefined for the given data."""


def _ratings(table) -> np.ndarray:
    x = np.asarray(table, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError(f"ratings table must be n x k with n, k >= 2, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("ratings table has missing or non-finite entries")
    return x


def anova_mean_squares(table) -> dict:
    """Two-way ANOVA mean squares for targets (rows), raters (columns) and residual."""
    x = _ratings(table)
    n, k = x.shape
    grand = x.mean()
    ss_rows = k * np.sum((x.mean(axis=1) - grand) ** 2)
    ss_cols = n * np.sum((x.mean(axis=0) - grand) ** 2)
    ss_total = np.sum((x - grand) ** 2)
    ss_err = ss_total - ss_rows - ss_cols
    return {
        "ms_rows": ss_rows / (n - 1),
        "ms_cols": ss_cols / (k - 1),
        "ms_err": ss_err / ((n - 1) * (k - 1)),
        "ss_total": ss_total,
        "n": n,
        "k": k,
    }


def icc_2_1(table) -> float:
    """Two-way random effects, absolute agreement, single measurement ICC.

    ``table`` has one row per target (subject) and one column per rater
    (method). Shrout and Fleiss form::

        (MSR - MSE) / (MSR + (k - 1) MSE + k / n (MSC - MSE))
    """
    ms = anova_mean_squares(table)
    n, k = ms["n"], ms["k"]
    msr, msc, mse = ms["ms_rows"], ms["ms_cols"], ms["ms_err"]
    denom = msr + (k - 1) * mse + k / n * (msc - mse)
    if ms["ss_total"] == 0 or denom == 0:
        raise DegenerateDataError("degenerate ratings")
    return float((msr - mse) / denom)


def _series(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError(f"need two equally long series of length >= 2, got {x.size} and {y.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("series contain non-finite values")
    return x, y


def pearson_r(x, y) -> float:
    x, y = _series(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise DegenerateDataError("zero variance series")
    return float(np.dot(dx, dy) / np.sqrt(sxx * syy))


def r_squared(induced, measured, reference: str = "ols") -> float:
    """Coefficient of determination of ``measured`` against ``induced``.

    ``reference="ols"`` scores the least-squares line of measured on induced;
    ``reference="identity"`` scores the line ``measured = induced`` instead and
    can be negative. A constant ``measured`` series scores 0.
    """
    x, y = _series(induced, measured)
    dx = x - x.mean()
    sxx = np.dot(dx, dx)
    if sxx == 0:
        raise DegenerateDataError("induced series has zero variance")
    dy = y - y.mean()
    ss_tot = np.dot(dy, dy)
    if ss_tot == 0:
        return 0.0
    if reference == "ols":
        slope = np.dot(dx, dy) / sxx
        fit = y.mean() + slope * dx
    elif reference == "identity":
        fit = x
    else:
        raise ValueError(f"unknown reference {reference!r}")
    ss_res = np.sum((y - fit) ** 2)
    return float(1.0 - ss_res / ss_tot)
