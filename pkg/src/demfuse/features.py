"""Per-pixel terrain features from a 3x3 moving window.

All features are evaluated on the 3x3 neighborhood of each interior cell.
Border cells, and cells whose window touches nodata, are nodata in every
feature map.

Window layout (row, col), north row first::

    NW N NE        (0,0) (0,1) (0,2)
    W  C  E        (1,0) (1,1) (1,2)
    SW S SE        (2,0) (2,1) (2,2)
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from demfuse.errors import GeometryError
from demfuse.raster import Grid, require_same_geometry

ACV_EPS = 1e-9
FLAT_GRADIENT = 1e-12
ENTROPY_BINS = 8


class FeatureKind(str, enum.Enum):
    SLOPE = "slope"
    ASPECT = "aspect"
    ACV = "acv"
    TRI = "tri"
    TPI = "tpi"
    ROUGHNESS = "roughness"
    RUGGEDNESS = "ruggedness"
    SRF = "srf"
    ENTROPY = "entropy"
    EDGINESS = "edginess"
    AUX = "aux"

    @classmethod
    def parse(cls, name: str) -> FeatureKind:
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown feature {name!r}; expected one of {valid}") from None


# the ten features derived from heights, in canonical order
TERRAIN_KINDS: tuple[FeatureKind, ...] = tuple(k for k in FeatureKind if k is not FeatureKind.AUX)


def parse_kinds(spec: str | Iterable[str]) -> list[FeatureKind]:
    """Parse ``"slope,tri"`` or an iterable of names; ``"all"`` means the ten terrain kinds."""
    if isinstance(spec, str):
        if spec.strip().lower() == "all":
            return list(TERRAIN_KINDS)
        spec = [s for s in spec.split(",") if s.strip()]
    kinds = [k if isinstance(k, FeatureKind) else FeatureKind.parse(k) for k in spec]
    if not kinds:
        raise ValueError("at least one feature kind is required")
    if len(set(kinds)) != len(kinds):
        raise ValueError("duplicate feature kinds")
    return kinds


# --------------------------------------------------------------------------
# window kernels; ``w`` has shape (..., 3, 3)
# --------------------------------------------------------------------------

def _gradients(w, cellsize):
    gx = (w[..., 1, 2] - w[..., 1, 0]) / (2.0 * cellsize)
    gy = (w[..., 0, 1] - w[..., 2, 1]) / (2.0 * cellsize)
    return gx, gy


def _slope(w, cellsize):
    gx, gy = _gradients(w, cellsize)
    return np.degrees(np.arctan(np.hypot(gx, gy)))


def _aspect(w, cellsize):
    gx, gy = _gradients(w, cellsize)
    a = np.mod(np.degrees(np.arctan2(gy, -gx)), 360.0)
    a = np.where(a >= 360.0, 0.0, a)
    return np.where(np.hypot(gx, gy) < FLAT_GRADIENT, 0.0, a)


def _neighbors(w):
    flat = w.reshape(w.shape[:-2] + (9,))
    return flat[..., [0, 1, 2, 3, 5, 6, 7, 8]]


def _tri(w):
    flat = w.reshape(w.shape[:-2] + (9,))
    return flat.std(axis=-1)


def _tpi(w):
    return w[..., 1, 1] - _neighbors(w).mean(axis=-1)


def _roughness(w):
    return np.abs(_neighbors(w) - w[..., 1, 1][..., None]).max(axis=-1)


def _ruggedness(w):
    flat = w.reshape(w.shape[:-2] + (9,))
    return flat.max(axis=-1) - flat.min(axis=-1)


def _acv(w):
    d = np.stack(
        [
            w[..., 0, 1] - w[..., 2, 1],  # N - S
            w[..., 1, 2] - w[..., 1, 0],  # E - W
            w[..., 0, 2] - w[..., 2, 0],  # NE - SW
            w[..., 0, 0] - w[..., 2, 2],  # NW - SE
        ],
        axis=-1,
    )
    return np.log1p(d.std(axis=-1) / (np.abs(d).mean(axis=-1) + ACV_EPS))


# neighbors clockwise from north: (row, col, dx, dy) in cell units
_RING = (
    (0, 1, 0, 1), (0, 2, 1, 1), (1, 2, 1, 0), (2, 2, 1, -1),
    (2, 1, 0, -1), (2, 0, -1, -1), (1, 0, -1, 0), (0, 0, -1, 1),
)


def _srf(w, cellsize):
    center = w[..., 1, 1]
    total = np.zeros(w.shape[:-2] + (3,))
    for k in range(8):
        r0, c0, dx0, dy0 = _RING[k]
        r1, c1, dx1, dy1 = _RING[(k + 1) % 8]
        a = np.stack(np.broadcast_arrays(dx0 * cellsize, dy0 * cellsize, w[..., r0, c0] - center), axis=-1)
        b = np.stack(np.broadcast_arrays(dx1 * cellsize, dy1 * cellsize, w[..., r1, c1] - center), axis=-1)
        n = np.cross(b, a)  # ring runs clockwise, so b x a points up
        total += n / np.linalg.norm(n, axis=-1, keepdims=True)
    return 8.0 / np.linalg.norm(total, axis=-1)


def _entropy(w):
    flat = w.reshape(w.shape[:-2] + (9,))
    lo = flat.min(axis=-1, keepdims=True)
    span = flat.max(axis=-1, keepdims=True) - lo
    flat_window = span[..., 0] == 0
    safe = np.where(span == 0, 1.0, span)
    idx = np.clip(np.floor((flat - lo) / safe * ENTROPY_BINS), 0, ENTROPY_BINS - 1).astype(np.intp)
    counts = np.stack([(idx == b).sum(axis=-1) for b in range(ENTROPY_BINS)], axis=-1)
    p = counts / 9.0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return np.where(flat_window, 0.0, terms.sum(axis=-1))


def _edginess(w):
    sx = (w[..., 0, 2] + 2 * w[..., 1, 2] + w[..., 2, 2]) - (w[..., 0, 0] + 2 * w[..., 1, 0] + w[..., 2, 0])
    sy = (w[..., 0, 0] + 2 * w[..., 0, 1] + w[..., 0, 2]) - (w[..., 2, 0] + 2 * w[..., 2, 1] + w[..., 2, 2])
    return np.hypot(sx, sy)


def window_feature(windows: np.ndarray, kind: FeatureKind, cellsize: float = 1.0) -> np.ndarray:
    """Evaluate one feature on an array of 3x3 windows (shape ``(..., 3, 3)``)."""
    w = np.asarray(windows, dtype=np.float64)
    if kind is FeatureKind.SLOPE:
        return _slope(w, cellsize)
    if kind is FeatureKind.ASPECT:
        return _aspect(w, cellsize)
    if kind is FeatureKind.ACV:
        return _acv(w)
    if kind is FeatureKind.TRI:
        return _tri(w)
    if kind is FeatureKind.TPI:
        return _tpi(w)
    if kind is FeatureKind.ROUGHNESS:
        return _roughness(w)
    if kind is FeatureKind.RUGGEDNESS:
        return _ruggedness(w)
    if kind is FeatureKind.SRF:
        return _srf(w, cellsize)
    if kind is FeatureKind.ENTROPY:
        return _entropy(w)
    if kind is FeatureKind.EDGINESS:
        return _edginess(w)
    raise ValueError(f"{kind.value} is supplied externally and cannot be computed from heights")


# --------------------------------------------------------------------------
# grid-level API
# --------------------------------------------------------------------------

def compute_feature(grid: Grid, kind: FeatureKind | str) -> Grid:
    """Feature map with the same geometry as ``grid``."""
    kind = FeatureKind.parse(kind) if isinstance(kind, str) else kind
    if kind is FeatureKind.AUX:
        raise ValueError("the aux error map is supplied, not computed")
    out = np.full(grid.shape, np.nan)
    nrows, ncols = grid.shape
    if nrows < 3 or ncols < 3:
        return grid.with_values(out)
    v = grid.values
    windows = sliding_window_view(np.nan_to_num(v, nan=0.0), (3, 3))
    ok = sliding_window_view(grid.valid, (3, 3)).all(axis=(-2, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        inner = window_feature(windows, kind, grid.header.cellsize)
    out[1:-1, 1:-1] = np.where(ok, inner, np.nan)
    return grid.with_values(out)


@dataclass
class FeatureTable:
    """Feature values for the valid pixels of a grid.

    ``pixel_indices`` are flat (row-major) indices into a grid of ``shape``.
    """

    pixel_indices: np.ndarray
    names: list[str]
    values: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        self.pixel_indices = np.asarray(self.pixel_indices, dtype=np.intp)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.pixel_indices), len(self.names))

    def __len__(self):
        return len(self.pixel_indices)

    @property
    def rows(self) -> np.ndarray:
        return self.pixel_indices // self.shape[1]

    @property
    def cols(self) -> np.ndarray:
        return self.pixel_indices % self.shape[1]

    def subset(self, keep) -> FeatureTable:
        """Rows selected by a boolean mask or an index array."""
        return FeatureTable(self.pixel_indices[keep], list(self.names), self.values[keep], self.shape)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]


def extract_feature_table(height: Grid, aux: Grid | None, kinds: Sequence[FeatureKind | str]) -> FeatureTable:
    """Stack the requested features for every pixel where all of them are valid."""
    kinds = parse_kinds(kinds)
    wants_aux = FeatureKind.AUX in kinds
    if wants_aux and aux is None:
        raise ValueError("aux feature requested but no aux grid given")
    if aux is not None and not wants_aux:
        raise ValueError("aux grid given but aux feature not requested")
    if aux is not None:
        require_same_geometry(height, aux)

    columns = []
    for k in kinds:
        columns.append(aux.values if k is FeatureKind.AUX else compute_feature(height, k).values)
    stack = np.stack(columns, axis=-1).reshape(-1, len(kinds))
    ok = height.valid.ravel() & ~np.isnan(stack).any(axis=1)
    idx = np.flatnonzero(ok)
    return FeatureTable(idx, [k.value for k in kinds], stack[idx], height.shape)


def write_feature_table(table: FeatureTable, dest: TextIO, extra: dict[str, np.ndarray] | None = None) -> None:
    """CSV with header ``row,col,<names>[,<extra>]``; 9 significant digits."""
    extra = extra or {}
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["row", "col", *table.names, *extra])
    extra_cols = list(extra.values())
    for i, (r, c) in enumerate(zip(table.rows, table.cols)):
        vals = [f"{x:.9g}" for x in table.values[i]]
        vals += [f"{col[i]:.9g}" for col in extra_cols]
        w.writerow([int(r), int(c), *vals])


def read_feature_table(src: TextIO, shape: tuple[int, int], extra: Sequence[str] = ()) -> tuple[FeatureTable, dict[str, np.ndarray]]:
    """Inverse of :func:`write_feature_table`. Trailing ``extra`` columns are split off."""
    reader = csv.reader(src)
    header = next(reader)
    if header[:2] != ["row", "col"]:
        raise GeometryError("feature CSV must start with row,col columns")
    n_extra = len(extra)
    if n_extra and header[len(header) - n_extra:] != list(extra):
        raise ValueError(f"feature CSV lacks trailing columns {list(extra)}")
    names = header[2:len(header) - n_extra]
    data = np.array([[float(x) for x in row] for row in reader if row], dtype=np.float64).reshape(-1, len(header))
    idx = data[:, 0].astype(np.intp) * shape[1] + data[:, 1].astype(np.intp)
    table = FeatureTable(idx, names, data[:, 2:2 + len(names)], shape)
    return table, {name: data[:, 2 + len(names) + j] for j, name in enumerate(extra)}
