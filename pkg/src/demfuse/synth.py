"""Synthetic ground truth and feature-correlated DEM corruption.

Every output is reproducible from (seed, parameters); randomness comes from
:class:`demfuse.rng.CounterRNG`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from demfuse.features import FeatureKind, compute_feature
from demfuse.raster import Grid, GridHeader
from demfuse.rng import CounterRNG

# stream ids keep the draws of independent generators apart
_TERRAIN_STREAM = 1
_BUILDING_STREAM = 2
_NOISE_STREAM = 3


def valid_size(size: int) -> bool:
    return size >= 3 and ((size - 1) & (size - 2)) == 0


def diamond_square(size: int, roughness: float, seed: int) -> np.ndarray:
    """Raw diamond-square heights (unscaled) on a ``size x size`` array.

    ``roughness`` multiplies the displacement amplitude after every level.
    """
    if not valid_size(size):
        raise ValueError(f"size must be 2**k + 1 with k >= 1, got {size}")
    if not 0 < roughness <= 1:
        raise ValueError(f"roughness must lie in (0, 1], got {roughness}")
    rng = CounterRNG(seed, _TERRAIN_STREAM)
    h = np.zeros((size, size))
    h[[0, 0, -1, -1], [0, -1, 0, -1]] = rng.uniform(4, -1.0, 1.0)

    step = size - 1
    amp = 1.0
    while step > 1:
        half = step // 2
        # diamond: centers of each square
        c = h[:-1:step, :-1:step] + h[:-1:step, step::step] + h[step::step, :-1:step] + h[step::step, step::step]
        h[half::step, half::step] = 0.25 * c + amp * rng.uniform(c.size, -1.0, 1.0).reshape(c.shape)

        # square: edge midpoints, averaging the 3 or 4 neighbors at distance half
        rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        target = ((rows % step == half) & (cols % step == 0)) | ((rows % step == 0) & (cols % step == half))
        r, q = np.nonzero(target)
        total = np.zeros(r.size)
        count = np.zeros(r.size)
        for dr, dc in ((-half, 0), (half, 0), (0, -half), (0, half)):
            rr, cc = r + dr, q + dc
            ok = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
            total[ok] += h[rr[ok], cc[ok]]
            count[ok] += 1
        h[r, q] = total / count + amp * rng.uniform(r.size, -1.0, 1.0)

        amp *= roughness
        step = half
    return h


def generate_terrain(size: int, roughness: float = 0.55, seed: int = 0,
                     z_range: tuple[float, float] = (0.0, 60.0), cellsize: float = 5.0,
                     xll: float = 0.0, yll: float = 0.0) -> Grid:
    """Fractal terrain rescaled so its heights span ``z_range`` exactly."""
    h = diamond_square(size, roughness, seed)
    lo, hi = h.min(), h.max()
    z0, z1 = z_range
    scaled = z0 + (h - lo) / (hi - lo) * (z1 - z0) if hi > lo else np.full_like(h, z0)
    return Grid(GridHeader(size, size, xll, yll, cellsize), scaled)


def add_buildings(terrain: Grid, density: float, height_range: tuple[float, float] = (6.0, 30.0),
                  seed: int = 0, footprint: tuple[int, int] = (2, 6),
                  region: np.ndarray | None = None) -> Grid:
    """Raise flat-roofed rectangular blocks until ``density`` of the area is covered.

    Args:
        density: target fraction of (region) cells covered by buildings.
        height_range: building height above the highest ground cell of its footprint.
        footprint: min and max side length in cells.
        region: optional boolean mask; buildings are confined to it and density
            refers to its area.
    """
    if not 0 <= density <= 1:
        raise ValueError("density must lie in [0, 1]")
    out = terrain.values.copy()
    if density == 0:
        return terrain.with_values(out)
    nrows, ncols = terrain.shape
    allowed = np.ones(terrain.shape, bool) if region is None else np.asarray(region, bool)
    area = allowed.sum()
    if area == 0:
        return terrain.with_values(out)

    rng = CounterRNG(seed, _BUILDING_STREAM)
    covered = np.zeros(terrain.shape, bool)
    lo_fp, hi_fp = footprint
    for _ in range(20000):
        if covered.sum() >= density * area:
            break
        r0, c0 = rng.integers(0, nrows, 1)[0], rng.integers(0, ncols, 1)[0]
        bh, bw = rng.integers(lo_fp, hi_fp + 1, 2)
        height = rng.uniform(1, *height_range)[0]
        r1, c1 = min(r0 + bh, nrows), min(c0 + bw, ncols)
        if not allowed[r0:r1, c0:c1].all():
            continue
        block = terrain.values[r0:r1, c0:c1]
        if np.isnan(block).any():
            continue
        roof = block.max() + height
        out[r0:r1, c0:c1] = np.maximum(out[r0:r1, c0:c1], roof)
        covered[r0:r1, c0:c1] = True
    return terrain.with_values(out)


@dataclass(frozen=True)
class ErrorModel:
    """Per-pixel error law ``sigma = base_sigma + feature_gain * driver``.

    ``driver`` is a terrain feature evaluated on the true surface. ``tilt`` is
    a planar trend in metres per cell (east, north) about the grid center.
    """

    base_sigma: float
    feature_gain: float
    driver: FeatureKind = FeatureKind.ROUGHNESS
    bias: float = 0.0
    tilt: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.base_sigma < 0:
            raise ValueError("base_sigma must be nonnegative")
        if self.driver is FeatureKind.AUX:
            raise ValueError("the error driver must be a terrain feature")

    def with_seed(self, seed: int) -> ErrorModel:
        return replace(self, seed=seed)


PRESETS: dict[str, ErrorModel] = {
    # SAR-like: accurate on smooth ground, degrades sharply at height jumps
    "insar-like": ErrorModel(base_sigma=0.4, feature_gain=0.15, driver=FeatureKind.ROUGHNESS),
    # optical-like: noisier baseline, milder dependence on local texture
    "optical-like": ErrorModel(base_sigma=1.2, feature_gain=0.4, driver=FeatureKind.ENTROPY),
}


def driver_map(truth: Grid, kind: FeatureKind) -> np.ndarray:
    """Feature of ``truth`` with edge replication so border cells get values too."""
    padded = np.pad(truth.values, 1, mode="edge")
    hdr = truth.header
    g = Grid(GridHeader(hdr.ncols + 2, hdr.nrows + 2, hdr.xll - hdr.cellsize, hdr.yll - hdr.cellsize,
                        hdr.cellsize, hdr.nodata), padded)
    f = compute_feature(g, kind).values[1:-1, 1:-1]
    # cells next to nodata have no driver value; treat as zero extra error
    return np.where(truth.valid & np.isnan(f), 0.0, f)


def error_sigma(truth: Grid, model: ErrorModel) -> np.ndarray:
    sigma = model.base_sigma + model.feature_gain * driver_map(truth, model.driver)
    if np.any(sigma[truth.valid] < 0):
        raise ValueError("error model yields a negative sigma")
    return np.where(truth.valid, sigma, np.nan)


def corrupt(truth: Grid, model: ErrorModel) -> tuple[Grid, Grid]:
    """Simulated DEM and the per-pixel sigma used to make it (an oracle HEM)."""
    sigma = error_sigma(truth, model)
    nrows, ncols = truth.shape
    rows, cols = np.mgrid[0:nrows, 0:ncols]
    plane = model.tilt[0] * (cols - (ncols - 1) / 2) + model.tilt[1] * ((nrows - 1) / 2 - rows)
    noise = CounterRNG(model.seed, _NOISE_STREAM).normal(nrows * ncols).reshape(truth.shape)
    dem = truth.values + model.bias + plane + sigma * noise
    return truth.with_values(dem), truth.with_values(sigma)


def reported_hem(truth: Grid, model: ErrorModel) -> Grid:
    """HEM that only knows the feature-independent noise level.

    Emulates a delivered error map that misses the terrain-driven error source.
    """
    return truth.with_values(np.where(truth.valid, model.base_sigma, np.nan))


@dataclass
class Scene:
    truth: Grid
    dem_a: Grid
    dem_b: Grid
    sigma_a: Grid
    sigma_b: Grid
    model_a: ErrorModel
    model_b: ErrorModel
    land: np.ndarray | None = None

    def reported_hems(self) -> tuple[Grid, Grid]:
        return reported_hem(self.truth, self.model_a), reported_hem(self.truth, self.model_b)


def make_truth(size: int = 257, seed: int = 0, density: float = 0.5, roughness: float = 0.55,
               cellsize: float = 5.0, region: np.ndarray | None = None) -> Grid:
    terrain = generate_terrain(size, roughness, seed, cellsize=cellsize)
    return add_buildings(terrain, density, seed=seed, region=region)


def make_scene(size: int = 257, seed: int = 0, presets: tuple[str, str] = ("insar-like", "optical-like"),
               density: float = 0.5, cellsize: float = 5.0) -> Scene:
    """Truth surface plus two independently corrupted DEMs."""
    truth = make_truth(size, seed, density, cellsize=cellsize)
    return _corrupt_pair(truth, seed, presets)


def make_mixed_scene(size: int = 257, seed: int = 0, density: float = 0.5,
                     presets: tuple[str, str] = ("insar-like", "optical-like"), cellsize: float = 5.0) -> Scene:
    """West half built up, east half open terrain; ``land`` is 1 where urban."""
    land = np.zeros((size, size), dtype=np.int8)
    land[:, : size // 2] = 1
    truth = make_truth(size, seed, density, cellsize=cellsize, region=land.astype(bool))
    scene = _corrupt_pair(truth, seed, presets)
    scene.land = land
    return scene


def _corrupt_pair(truth: Grid, seed: int, presets: tuple[str, str]) -> Scene:
    ma = PRESETS[presets[0]].with_seed(2 * seed + 1)
    mb = PRESETS[presets[1]].with_seed(2 * seed + 2)
    dem_a, sig_a = corrupt(truth, ma)
    dem_b, sig_b = corrupt(truth, mb)
    return Scene(truth, dem_a, dem_b, sig_a, sig_b, ma, mb)
