"""Grid container, ASCII grid I/O, bilinear resampling and grid arithmetic.

Heights are held in memory as a 2D float64 array, north row first, with
nodata cells stored as NaN. The header's ``nodata`` sentinel is only used when
reading and writing text.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TextIO

import numpy as np

from demfuse.errors import GeometryError, GridParseError

DEFAULT_NODATA = -9999.0

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")
_CENTER_KEYS = ("xllcenter", "yllcenter")


@dataclass(frozen=True)
class GridHeader:
    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1:
            raise GeometryError(f"grid must have at least one cell, got {self.nrows}x{self.ncols}")
        if not self.cellsize > 0:
            raise GeometryError(f"cellsize must be positive, got {self.cellsize}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def ytop(self) -> float:
        return self.yll + self.nrows * self.cellsize

    def same_geometry(self, other: GridHeader) -> bool:
        """True when both headers describe the same cells (nodata sentinel ignored)."""
        return (
            self.ncols == other.ncols
            and self.nrows == other.nrows
            and math.isclose(self.xll, other.xll, rel_tol=0, abs_tol=1e-9 * max(1.0, abs(self.xll)))
            and math.isclose(self.yll, other.yll, rel_tol=0, abs_tol=1e-9 * max(1.0, abs(self.yll)))
            and math.isclose(self.cellsize, other.cellsize, rel_tol=1e-12)
        )

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (x, y) arrays of shape (nrows, ncols) with map coordinates of cell centers."""
        xs = self.xll + (np.arange(self.ncols) + 0.5) * self.cellsize
        ys = self.ytop - (np.arange(self.nrows) + 0.5) * self.cellsize
        return np.meshgrid(xs, ys)


@dataclass
class Grid:
    """Single-band raster. ``values`` has shape (nrows, ncols); NaN marks nodata."""

    header: GridHeader
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.header.shape:
            raise GeometryError(
                f"values shape {self.values.shape} does not match header {self.header.shape}"
            )
        if np.isinf(self.values).any():
            raise ValueError("grid values must be finite or nodata")

    @classmethod
    def from_array(cls, values, cellsize: float = 1.0, xll: float = 0.0, yll: float = 0.0,
                   nodata: float = DEFAULT_NODATA) -> Grid:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise GeometryError("grid values must be two-dimensional")
        header = GridHeader(values.shape[1], values.shape[0], xll, yll, cellsize, nodata)
        return cls(header, values.copy())

    @property
    def shape(self) -> tuple[int, int]:
        return self.header.shape

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def with_values(self, values) -> Grid:
        return Grid(self.header, np.asarray(values, dtype=np.float64))

    def copy(self) -> Grid:
        return Grid(self.header, self.values.copy())


def require_same_geometry(*grids: Grid) -> None:
    first = grids[0].header
    for g in grids[1:]:
        if not first.same_geometry(g.header):
            raise GeometryError(f"grid geometries differ: {first} vs {g.header}")


# --------------------------------------------------------------------------
# ASCII grid I/O
# --------------------------------------------------------------------------

def read_ascii_grid(source: str | TextIO | Path) -> Grid:
    """Parse an ASCII grid from a string, open text stream or path.

    Header keys are matched case-insensitively. ``xllcenter``/``yllcenter``
    are accepted and converted to corner registration.
    """
    if isinstance(source, Path):
        text = source.read_text()
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()

    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 6:
        raise GridParseError("grid text ends before the six header lines")

    raw: dict[str, str] = {}
    for ln in lines[:6]:
        parts = ln.split()
        key = parts[0].lower() if parts else ""
        if len(parts) != 2 or key not in _HEADER_KEYS + _CENTER_KEYS:
            raise GridParseError(f"malformed header line for key {parts[0] if parts else '?'!r}: {ln!r}")
        raw[key] = parts[1]

    def number(key, cast=float):
        try:
            return cast(raw[key])
        except KeyError:
            raise GridParseError(f"missing header key {key!r}") from None
        except ValueError:
            raise GridParseError(f"bad value for header key {key!r}: {raw[key]!r}") from None

    ncols = number("ncols", int)
    nrows = number("nrows", int)
    cellsize = number("cellsize")
    nodata = number("nodata_value")
    if "xllcenter" in raw:
        xll = float(raw["xllcenter"]) - cellsize / 2
    else:
        xll = number("xllcorner")
    if "yllcenter" in raw:
        yll = float(raw["yllcenter"]) - cellsize / 2
    else:
        yll = number("yllcorner")

    header = GridHeader(ncols, nrows, xll, yll, cellsize, nodata)

    body = lines[6:]
    if len(body) != nrows:
        raise GridParseError(f"expected {nrows} data rows, found {len(body)}")
    values = np.empty((nrows, ncols))
    for i, ln in enumerate(body):
        row = ln.split()
        if len(row) != ncols:
            raise GridParseError(f"row {i} has {len(row)} values, expected {ncols}")
        try:
            values[i] = [float(v) for v in row]
        except ValueError as exc:
            raise GridParseError(f"row {i}: {exc}") from None

    values[values == nodata] = np.nan
    return Grid(header, values)


def write_ascii_grid(grid: Grid, dest: TextIO | Path | None = None) -> str:
    """Serialize a grid; returns the text and also writes it to ``dest`` if given.

    Raises:
        ValueError: a valid cell holds the nodata sentinel.
    """
    h = grid.header
    v = grid.values
    if np.any(v[grid.valid] == h.nodata):
        raise ValueError(f"grid stores the nodata sentinel {h.nodata!r} as a real height")

    out = io.StringIO()
    out.write(f"ncols {h.ncols}\n")
    out.write(f"nrows {h.nrows}\n")
    out.write(f"xllcorner {h.xll:.17g}\n")
    out.write(f"yllcorner {h.yll:.17g}\n")
    out.write(f"cellsize {h.cellsize:.17g}\n")
    out.write(f"NODATA_value {h.nodata:.17g}\n")
    nodata_str = f"{h.nodata:.17g}"
    for row in v:
        out.write(" ".join(nodata_str if np.isnan(x) else f"{x:.15g}" for x in row))
        out.write("\n")
    text = out.getvalue()

    if isinstance(dest, Path):
        dest.write_text(text)
    elif dest is not None:
        dest.write(text)
    return text


def load_grid(path) -> Grid:
    return read_ascii_grid(Path(path))


def save_grid(grid: Grid, path) -> None:
    write_ascii_grid(grid, Path(path))


# --------------------------------------------------------------------------
# Interpolation
# --------------------------------------------------------------------------

def bilinear_sample(grid: Grid, x, y) -> np.ndarray:
    """Bilinearly interpolate ``grid`` at map coordinates (x, y).

    Points outside the grid extent give NaN. Points inside the extent but
    beyond the outermost cell centers use the nearest edge row/column.
    Any source cell with nonzero weight that is nodata makes the result NaN.
    """
    h = grid.header
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    col = (x - h.xll) / h.cellsize - 0.5
    row = (h.ytop - y) / h.cellsize - 0.5

    eps = 1e-9
    inside = (
        (col >= -0.5 - eps) & (col <= h.ncols - 0.5 + eps)
        & (row >= -0.5 - eps) & (row <= h.nrows - 0.5 + eps)
    )
    col = np.clip(col, 0.0, h.ncols - 1.0)
    row = np.clip(row, 0.0, h.nrows - 1.0)
    c0 = np.floor(col).astype(np.intp)
    r0 = np.floor(row).astype(np.intp)
    c1 = np.minimum(c0 + 1, h.ncols - 1)
    r1 = np.minimum(r0 + 1, h.nrows - 1)
    fc = col - c0
    fr = row - r0

    v = grid.values
    corners = (
        (v[r0, c0], (1 - fr) * (1 - fc)),
        (v[r0, c1], (1 - fr) * fc),
        (v[r1, c0], fr * (1 - fc)),
        (v[r1, c1], fr * fc),
    )
    out = np.zeros(np.broadcast(x, y).shape)
    bad = ~inside
    for vals, w in corners:
        touched = w > 0
        bad |= touched & np.isnan(vals)
        out += np.where(touched, np.nan_to_num(vals) * w, 0.0)
    out[bad] = np.nan
    return out


def resample_bilinear(grid: Grid, target_cellsize: float) -> Grid:
    """Resample to a new pixel spacing, keeping the lower-left origin.

    Partial trailing cells at the top and right are dropped.
    """
    if not target_cellsize > 0:
        raise ValueError("target_cellsize must be positive")
    h = grid.header
    width = h.ncols * h.cellsize
    height = h.nrows * h.cellsize
    # small slack so exact multiples are not lost to rounding
    ncols = int(math.floor(width / target_cellsize + 1e-9))
    nrows = int(math.floor(height / target_cellsize + 1e-9))
    if ncols < 1 or nrows < 1:
        raise GeometryError(
            f"target cellsize {target_cellsize} yields a degenerate {nrows}x{ncols} grid"
        )
    out_header = GridHeader(ncols, nrows, h.xll, h.yll, float(target_cellsize), h.nodata)
    xs, ys = out_header.cell_centers()
    return Grid(out_header, bilinear_sample(grid, xs, ys))


def grid_subtract(a: Grid, b: Grid) -> Grid:
    """Per-pixel ``a - b``; nodata in either input propagates."""
    require_same_geometry(a, b)
    return Grid(a.header, a.values - b.values)


def with_header(grid: Grid, **changes) -> Grid:
    return Grid(replace(grid.header, **changes), grid.values.copy())
