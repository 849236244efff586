"""Training-target refinement for the error predictor.

Raw DEM-minus-reference residuals are too noisy to learn from directly. They
are cleaned in three stages:

1. drop pixels whose residual lies more than 3 NMAD from the median;
2. for each feature, bin its values with the Freedman-Diaconis rule and give
   every pixel the mean absolute residual of its bin;
3. average the per-feature smoothed residuals into one target per pixel.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from demfuse.errors import DegenerateWarning, InsufficientDataError
from demfuse.features import FeatureKind, FeatureTable, extract_feature_table, read_feature_table, write_feature_table
from demfuse.metrics import nmad
from demfuse.raster import Grid, require_same_geometry

OUTLIER_NMADS = 3.0
MIN_SAMPLES = 10


@dataclass
class ResidualVector:
    pixel_indices: np.ndarray
    signed: np.ndarray

    @property
    def absolute(self) -> np.ndarray:
        return np.abs(self.signed)

    def __len__(self):
        return len(self.signed)


@dataclass
class BinSpec:
    """Freedman-Diaconis binning of one feature column.

    ``assignment`` maps each sample to its bin. ``bin_means`` is empty until
    residuals are attached by :func:`binwise_smooth`.
    """

    feature_index: int
    iqr: float
    sample_count: int
    bin_width: float
    bin_count: int
    edges: np.ndarray
    counts: np.ndarray
    assignment: np.ndarray
    degenerate: bool = False
    bin_means: np.ndarray = field(default_factory=lambda: np.empty(0))


@dataclass
class TrainingSet:
    features: np.ndarray
    targets: np.ndarray
    feature_names: list[str]
    pixel_indices: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.pixel_indices = np.asarray(self.pixel_indices, dtype=np.intp)
        if self.features.shape != (len(self.targets), len(self.feature_names)):
            raise ValueError("features must be an m x n matrix matching targets and names")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.targets))):
            raise ValueError("training set contains non-finite entries")
        if np.any(self.targets < 0):
            raise ValueError("training targets must be nonnegative error magnitudes")

    def __len__(self):
        return len(self.targets)

    def subset(self, keep) -> TrainingSet:
        return TrainingSet(self.features[keep], self.targets[keep], list(self.feature_names),
                           self.pixel_indices[keep], self.shape)

    def sample(self, n: int, seed: int = 0) -> TrainingSet:
        """Random subset of ``n`` rows (all rows if ``n >= len(self)``)."""
        if n >= len(self):
            return self
        rng = np.random.default_rng(seed)
        return self.subset(np.sort(rng.choice(len(self), size=n, replace=False)))

    @staticmethod
    def concat(sets: Sequence[TrainingSet]) -> TrainingSet:
        """Pool several training sets; pixel indices lose meaning and are renumbered."""
        names = sets[0].feature_names
        if any(s.feature_names != names for s in sets):
            raise ValueError("cannot pool training sets with different feature names")
        feats = np.vstack([s.features for s in sets])
        return TrainingSet(feats, np.concatenate([s.targets for s in sets]), list(names),
                           np.arange(len(feats)), (len(feats), 1))

    def write_csv(self, dest: TextIO) -> None:
        table = FeatureTable(self.pixel_indices, self.feature_names, self.features, self.shape)
        write_feature_table(table, dest, extra={"target": self.targets})

    @classmethod
    def read_csv(cls, src: TextIO, shape: tuple[int, int]) -> TrainingSet:
        table, extra = read_feature_table(src, shape, extra=("target",))
        return cls(table.values, extra["target"], table.names, table.pixel_indices, shape)


def compute_residuals(dem: Grid, reference: Grid, table: FeatureTable) -> tuple[ResidualVector, FeatureTable]:
    """Signed ``dem - reference`` at the table's pixels.

    Pixels that are nodata in either grid are dropped from the returned
    residuals and table alike.
    """
    require_same_geometry(dem, reference)
    if table.shape != dem.shape:
        raise ValueError(f"table shape {table.shape} does not match grid {dem.shape}")
    diff = (dem.values - reference.values).ravel()[table.pixel_indices]
    keep = ~np.isnan(diff)
    kept = table.subset(keep)
    return ResidualVector(kept.pixel_indices, diff[keep]), kept


def outlier_mask(signed) -> np.ndarray:
    """True for residuals to keep: ``|e - median(e)| <= 3 * NMAD(e)``."""
    e = np.asarray(signed, dtype=np.float64)
    return np.abs(e - np.median(e)) <= OUTLIER_NMADS * nmad(e)


def remove_outliers(res: ResidualVector, table: FeatureTable) -> tuple[ResidualVector, FeatureTable]:
    """Drop pixels with ``|e - median(e)| > 3 * NMAD(e)`` together with their feature rows.

    Raises:
        InsufficientDataError: fewer than 10 samples before or after removal.
    """
    if len(res) != len(table) or not np.array_equal(res.pixel_indices, table.pixel_indices):
        raise ValueError("residuals and feature table are not aligned")
    if len(res) < MIN_SAMPLES:
        raise InsufficientDataError(f"{len(res)} residuals, need at least {MIN_SAMPLES}")
    e = res.signed
    keep = outlier_mask(e)
    if keep.sum() < MIN_SAMPLES:
        raise InsufficientDataError(f"only {int(keep.sum())} samples survive outlier removal")
    return ResidualVector(res.pixel_indices[keep], e[keep]), table.subset(keep)


def _degenerate_bin(values, iqr, k, feature_index, reason):
    warnings.warn(f"feature {feature_index}: {reason}; using a single bin", DegenerateWarning, stacklevel=3)
    lo, hi = float(values.min()), float(values.max())
    return BinSpec(
        feature_index=feature_index, iqr=iqr, sample_count=k, bin_width=max(hi - lo, 0.0),
        bin_count=1, edges=np.array([lo, hi]), counts=np.array([k]),
        assignment=np.zeros(k, dtype=np.intp), degenerate=True,
    )


def fd_bin(feature_values, k: int | None = None, feature_index: int = 0) -> BinSpec:
    """Bin one feature column with the Freedman-Diaconis rule.

    Bin width is ``2 * IQR * k**(-1/3)`` with a type-7 (linear) IQR, and the
    bin count is ``ceil((max - min) / width)``. Edges start at the minimum and
    are spaced by the width; the last bin is closed on the right.

    A zero IQR or zero range gives a single bin flagged ``degenerate``.
    """
    v = np.asarray(feature_values, dtype=np.float64).ravel()
    if k is None:
        k = v.size
    if k != v.size:
        raise ValueError(f"k={k} but {v.size} values given")
    if k < MIN_SAMPLES:
        raise InsufficientDataError(f"binning needs at least {MIN_SAMPLES} values, got {k}")
    if not np.all(np.isfinite(v)):
        raise ValueError("feature values must be finite")

    q25, q75 = np.percentile(v, [25, 75])
    iqr = float(q75 - q25)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return _degenerate_bin(v, iqr, k, feature_index, "constant values")
    if iqr <= 0:
        return _degenerate_bin(v, iqr, k, feature_index, "zero interquartile range")

    width = 2.0 * iqr * k ** (-1.0 / 3.0)
    n_bins = max(1, math.ceil((hi - lo) / width))
    edges = lo + width * np.arange(n_bins + 1)
    assignment = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(assignment, minlength=n_bins)
    return BinSpec(feature_index, iqr, k, width, n_bins, edges, counts, assignment)


def default_min_count(k: int) -> int:
    return max(MIN_SAMPLES, math.ceil(0.001 * k))


def binwise_smooth(bins: BinSpec, res: ResidualVector, min_count: int | None = None) -> np.ndarray:
    """Replace each pixel's residual by the mean absolute residual of its bin.

    Pixels in bins holding fewer than ``min_count`` samples get NaN. The
    per-bin means are stored on ``bins.bin_means``.
    """
    if len(bins.assignment) != len(res):
        raise ValueError("bins and residuals cover different pixels")
    if min_count is None:
        min_count = default_min_count(len(res))
    sums = np.bincount(bins.assignment, weights=res.absolute, minlength=bins.bin_count)
    counts = np.bincount(bins.assignment, minlength=bins.bin_count)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts >= max(min_count, 1), sums / counts, np.nan)
    bins.bin_means = means
    return means[bins.assignment]


def combine_smoothed(per_feature: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel mean of the non-missing smoothed residuals (NaN if all are missing)."""
    stack = np.vstack([np.asarray(a, dtype=np.float64) for a in per_feature])
    n = (~np.isnan(stack)).sum(axis=0)
    total = np.nansum(stack, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, total / np.maximum(n, 1), np.nan)


def smooth_targets(table: FeatureTable, res: ResidualVector, min_count: int | None = None) -> tuple[np.ndarray, list[BinSpec]]:
    """Two-step mean filtering over all feature columns."""
    if min_count is None:
        min_count = default_min_count(len(res))
    smoothed, specs = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWarning)
        for j in range(len(table.names)):
            b = fd_bin(table.values[:, j], feature_index=j)
            smoothed.append(binwise_smooth(b, res, min_count))
            specs.append(b)
    return combine_smoothed(smoothed), specs


def build_training_set(
    dem: Grid,
    reference: Grid,
    aux: Grid | None,
    kinds: Sequence[FeatureKind | str],
    min_count: int | None = None,
    refine: bool = True,
) -> TrainingSet:
    """Features, residuals, outlier removal and smoothing in one call.

    With ``refine=False`` the targets are the raw absolute residuals after
    outlier removal, without bin-wise smoothing.
    """
    table = extract_feature_table(dem, aux, kinds)
    res, table = compute_residuals(dem, reference, table)
    res, table = remove_outliers(res, table)
    if refine:
        targets, _ = smooth_targets(table, res, min_count)
    else:
        targets = res.absolute
    keep = ~np.isnan(targets)
    return TrainingSet(table.values[keep], targets[keep], list(table.names),
                       table.pixel_indices[keep], table.shape)


def write_bins_csv(specs: Sequence[BinSpec], names: Sequence[str], dest: TextIO) -> None:
    """Per-bin feature-error curves: ``feature,bin,left,right,count,mean_abs_residual``."""
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["feature", "bin", "left", "right", "count", "mean_abs_residual"])
    for spec in specs:
        name = names[spec.feature_index]
        for b in range(spec.bin_count):
            mean = spec.bin_means[b] if len(spec.bin_means) else float("nan")
            w.writerow([name, b, f"{spec.edges[b]:.9g}", f"{spec.edges[b + 1]:.9g}",
                        int(spec.counts[b]), f"{mean:.9g}"])
