"""Delimited report writers (period decimal separator, 6 decimals, stable row order)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .metrics import LandmarkSet, TREResult


def fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6f}"
    return str(x)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def jacobian_histogram(jac: np.ndarray, bins: int = 100, value_range=(0.0, 2.0)):
    """Counts over ``bins`` equal bins plus under/overflow counts."""
    lo, hi = value_range
    vals = np.asarray(jac).ravel()
    counts, edges = np.histogram(vals, bins=bins, range=(lo, hi))
    # np.histogram puts hi itself in the last bin; keep [lo, hi) semantics elsewhere
    under = int(np.count_nonzero(vals < lo))
    over = int(np.count_nonzero(vals > hi))
    return counts, edges, under, over


def write_jacobian_histogram(path, jac: np.ndarray, bins: int = 100, value_range=(0.0, 2.0)) -> Path:
    counts, edges, under, over = jacobian_histogram(jac, bins, value_range)
    total = max(np.asarray(jac).size, 1)
    rows = [("-inf", edges[0], under, under / total)]
    rows += [(edges[i], edges[i + 1], int(c), c / total) for i, c in enumerate(counts)]
    rows.append((edges[-1], "inf", over, over / total))
    return write_csv(path, ("bin_lo", "bin_hi", "count", "fraction"), rows)


TRE_HEADER = (
    "landmark", "x_f", "y_f", "z_f", "x_m", "y_m", "z_m",
    "initial_mm", "tre_mm", "tre_std_mm", "pct_folding", "std_jac",
)


def write_tre_report(path, lm: LandmarkSet, result: TREResult, jac_stats: Optional[tuple[float, float]] = None) -> Path:
    """One row per evaluated landmark, then a ``summary`` row."""
    initial = lm.initial_distances()
    rows = []
    for idx, dist in zip(result.indices, result.distances):
        rows.append((int(idx), *lm.fixed[idx], *lm.moving[idx], initial[idx], dist, None, None, None))
    folding, std_jac = jac_stats if jac_stats is not None else (None, None)
    rows.append(
        ("summary", None, None, None, None, None, None,
         float(np.mean(initial[result.indices])), result.mean, result.std, folding, std_jac)
    )
    return write_csv(path, TRE_HEADER, rows)
