"""Weight maps from error maps and weighted-average fusion of two DEMs."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from demfuse.errors import DegenerateWarning
from demfuse.raster import Grid, require_same_geometry

DEFAULT_ERROR_FLOOR = 0.05
SCHEMES = ("inverse-square", "one-minus-norm")


@dataclass
class WeightPair:
    w_a: Grid
    w_b: Grid


def weights_inverse_square(errors: Grid, floor: float = DEFAULT_ERROR_FLOOR) -> Grid:
    """``1 / max(e, floor)**2``; nodata propagates."""
    if not floor > 0:
        raise ValueError("error floor must be positive")
    e = errors.values
    return errors.with_values(1.0 / np.maximum(e, floor) ** 2)


def weights_one_minus_norm(errors: Grid) -> Grid:
    """``1 - (e - min) / (max - min)`` over the valid pixels of one grid.

    A constant error grid gives weight 1 everywhere, with a DegenerateWarning.
    """
    e = errors.values
    valid = errors.valid
    if not valid.any():
        return errors.copy()
    lo = np.nanmin(e)
    hi = np.nanmax(e)
    if hi == lo:
        warnings.warn("constant error grid; all weights set to 1", DegenerateWarning, stacklevel=2)
        return errors.with_values(np.where(valid, 1.0, np.nan))
    return errors.with_values(1.0 - (e - lo) / (hi - lo))


def raw_weights(errors: Grid, scheme: str = "inverse-square", floor: float = DEFAULT_ERROR_FLOOR) -> Grid:
    if scheme == "inverse-square":
        return weights_inverse_square(errors, floor)
    if scheme == "one-minus-norm":
        return weights_one_minus_norm(errors)
    raise ValueError(f"unknown weighting scheme {scheme!r}; expected one of {SCHEMES}")


def normalize_pair(raw_a: Grid, raw_b: Grid) -> WeightPair:
    """Scale raw weights so they sum to one per pixel.

    A pixel valid in only one input gives that side weight 1 and leaves the
    other nodata. Two zero weights split 0.5/0.5.
    """
    require_same_geometry(raw_a, raw_b)
    a = raw_a.values
    b = raw_b.values
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("raw weights must be nonnegative")
    va, vb = raw_a.valid, raw_b.valid
    both = va & vb
    total = np.where(both, a + b, 1.0)
    zero = both & (total == 0)
    safe = np.where(zero, 1.0, total)

    wa = np.full(a.shape, np.nan)
    wb = np.full(b.shape, np.nan)
    wa[both] = np.where(zero, 0.5, a / safe)[both]
    wb[both] = np.where(zero, 0.5, b / safe)[both]
    wa[va & ~vb] = 1.0
    wb[vb & ~va] = 1.0
    return WeightPair(raw_a.with_values(wa), raw_b.with_values(wb))


def fuse_weighted(d_a: Grid, d_b: Grid, w: WeightPair) -> Grid:
    """``W_a * D_a + W_b * D_b`` per pixel.

    A pixel with a height in only one DEM copies that height. Where both
    heights exist but only one weight is defined, that DEM gets full weight;
    where neither weight is defined the heights are averaged.
    """
    require_same_geometry(d_a, d_b, w.w_a, w.w_b)
    ha, hb = d_a.values, d_b.values
    va, vb = d_a.valid, d_b.valid
    wa, wb = w.w_a.values, w.w_b.values
    ok_a, ok_b = w.w_a.valid, w.w_b.valid

    out = np.full(ha.shape, np.nan)
    both = va & vb
    out[va & ~vb] = ha[va & ~vb]
    out[vb & ~va] = hb[vb & ~va]

    full = both & ok_a & ok_b
    out[full] = wa[full] * ha[full] + wb[full] * hb[full]
    only_a = both & ok_a & ~ok_b
    out[only_a] = ha[only_a]
    only_b = both & ok_b & ~ok_a
    out[only_b] = hb[only_b]
    neither = both & ~ok_a & ~ok_b
    out[neither] = 0.5 * ha[neither] + 0.5 * hb[neither]
    return d_a.with_values(out)


def fuse_by_errors(d_a: Grid, d_b: Grid, err_a: Grid, err_b: Grid,
                   scheme: str = "inverse-square", floor: float = DEFAULT_ERROR_FLOOR) -> Grid:
    """Weights from two error maps, normalized, then weighted-average fusion."""
    pair = normalize_pair(raw_weights(err_a, scheme, floor), raw_weights(err_b, scheme, floor))
    return fuse_weighted(d_a, d_b, pair)


def fuse_hem_baseline(d_a: Grid, d_b: Grid, hem_a: Grid, hem_b: Grid,
                      scheme: str = "inverse-square", floor: float = DEFAULT_ERROR_FLOOR) -> Grid:
    """Fusion weighted by externally supplied height error maps."""
    return fuse_by_errors(d_a, d_b, hem_a, hem_b, scheme, floor)


def fuse_plain_average(d_a: Grid, d_b: Grid) -> Grid:
    require_same_geometry(d_a, d_b)
    half = d_a.with_values(np.full(d_a.shape, 0.5))
    return fuse_weighted(d_a, d_b, WeightPair(half, half.copy()))


def substitute_by_mask(d_a: Grid, d_b: Grid, mask: Grid) -> Grid:
    """Take ``d_b`` wherever ``mask == 1``; keep ``d_a`` elsewhere (e.g. lakes)."""
    require_same_geometry(d_a, d_b, mask)
    m = mask.values
    if not np.all(np.isin(m[mask.valid], (0.0, 1.0))):
        raise ValueError("mask values must be 0, 1 or nodata")
    take_b = mask.valid & (m == 1.0)
    return d_a.with_values(np.where(take_b, d_b.values, d_a.values))
