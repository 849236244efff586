"""Accuracy measures: RMSE, NMAD, Pearson correlation, pixel-improvement rate."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from demfuse.errors import InsufficientDataError
from demfuse.raster import Grid, require_same_geometry

NMAD_SCALE = 1.4826


def _as_nonempty(values, what="residuals") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise InsufficientDataError(f"{what} must be nonempty")
    return arr


def rmse(residuals) -> float:
    e = _as_nonempty(residuals)
    return float(np.sqrt(np.mean(e * e)))


def nmad(residuals) -> float:
    """1.4826 * median(|e - median(e)|), even-count medians by linear interpolation."""
    e = _as_nonempty(residuals)
    return float(NMAD_SCALE * np.median(np.abs(e - np.median(e))))


def pearson_correlation(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise InsufficientDataError("correlation needs at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("correlation undefined for zero-variance input")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def pct_pixels_improved(fused: Grid, baseline: Grid, truth: Grid) -> float:
    """Percent of pixels valid in all three grids where fused is strictly closer to truth."""
    require_same_geometry(fused, baseline, truth)
    ok = fused.valid & baseline.valid & truth.valid
    n = int(ok.sum())
    if n == 0:
        raise InsufficientDataError("no pixels valid in fused, baseline and truth")
    better = np.abs(fused.values[ok] - truth.values[ok]) < np.abs(baseline.values[ok] - truth.values[ok])
    return 100.0 * better.sum() / n


@dataclass
class AccuracyReport:
    rmse: float
    nmad: float
    sample_count: int
    correlation: float
    pct_improved: Optional[float] = None

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name}={v:.6g}" if isinstance(v, float) else f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> AccuracyReport:
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        return cls(
            rmse=float(kv["rmse"]),
            nmad=float(kv["nmad"]),
            sample_count=int(kv["sample_count"]),
            correlation=float(kv["correlation"]),
            pct_improved=float(kv["pct_improved"]) if "pct_improved" in kv else None,
        )


def accuracy_report(dem: Grid, truth: Grid, baseline: Grid | None = None) -> AccuracyReport:
    grids = [dem, truth] + ([baseline] if baseline is not None else [])
    require_same_geometry(*grids)
    ok = np.logical_and.reduce([g.valid for g in grids])
    if not ok.any():
        raise InsufficientDataError("no pixels valid in every grid")
    e = dem.values[ok] - truth.values[ok]
    try:
        corr = pearson_correlation(dem.values[ok], truth.values[ok])
    except (ValueError, InsufficientDataError):
        corr = float("nan")
    pct = None
    if baseline is not None:
        pct = pct_pixels_improved(dem, baseline, truth)
    return AccuracyReport(rmse(e), nmad(e), int(ok.sum()), corr, pct)
