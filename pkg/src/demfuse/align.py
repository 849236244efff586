"""Co-registration of two DEM grids: vertical offset and rigid ICP."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from demfuse.errors import DivergenceError, InsufficientDataError, ModelFormatError
from demfuse.raster import Grid, GridHeader, bilinear_sample, require_same_geometry, resample_bilinear

MAX_POINTS = 50_000
DENSIFY = 3
MIN_BIAS_PIXELS = 100
MIN_ICP_CELLS = 1000
REJECT_FACTOR = 3.0


@dataclass(frozen=True)
class RigidTransform:
    """``p' = rotation @ p + translation`` on (x, y, z) map coordinates."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) <= 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, degrees: float, center=(0.0, 0.0, 0.0), shift=(0.0, 0.0, 0.0)) -> RigidTransform:
        """Rotation about the vertical axis through ``center``, then a shift."""
        a = math.radians(degrees)
        R = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
        c = np.asarray(center, dtype=np.float64)
        return cls(R, c - R @ c + np.asarray(shift, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, first: RigidTransform) -> RigidTransform:
        """Transform equivalent to applying ``first`` and then ``self``."""
        return RigidTransform(self.rotation @ first.rotation, self.rotation @ first.translation + self.translation)

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    @property
    def yaw_degrees(self) -> float:
        return math.degrees(math.atan2(self.rotation[1, 0], self.rotation[0, 0]))

    def to_text(self) -> str:
        rows = [" ".join(f"{v:.17g}" for v in row) for row in self.rotation]
        rows.append(" ".join(f"{v:.17g}" for v in self.translation))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> RigidTransform:
        try:
            nums = [float(v) for v in text.split()]
        except ValueError:
            raise ModelFormatError("transform file holds non-numeric entries") from None
        if len(nums) != 12:
            raise ModelFormatError(f"transform file needs 12 numbers, found {len(nums)}")
        try:
            return cls(np.array(nums[:9]).reshape(3, 3), np.array(nums[9:]))
        except ValueError as exc:
            raise ModelFormatError(str(exc)) from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> RigidTransform:
        return cls.from_text(Path(path).read_text())


def vertical_bias(moving: Grid, fixed: Grid) -> float:
    """Median of ``fixed - moving`` over pixels valid in both grids."""
    require_same_geometry(moving, fixed)
    d = fixed.values - moving.values
    d = d[~np.isnan(d)]
    if d.size < MIN_BIAS_PIXELS:
        raise InsufficientDataError(f"{d.size} overlapping pixels, need {MIN_BIAS_PIXELS}")
    return float(np.median(d))


def grid_points(grid: Grid, max_points: int | None = MAX_POINTS) -> np.ndarray:
    """(x, y, z) of valid cell centers, thinned by a uniform stride to ``max_points``."""
    xs, ys = grid.header.cell_centers()
    ok = grid.valid
    pts = np.column_stack([xs[ok], ys[ok], grid.values[ok]])
    if max_points is not None and len(pts) > max_points:
        stride = math.ceil(len(pts) / max_points)
        pts = pts[::stride]
    return pts


def best_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rotation and translation taking ``src`` onto ``dst`` (Kabsch/SVD)."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


def _boxes_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    lo = np.maximum(a[:, :2].min(axis=0), b[:, :2].min(axis=0))
    hi = np.minimum(a[:, :2].max(axis=0), b[:, :2].max(axis=0))
    return bool(np.all(lo <= hi))


def _match(tree: cKDTree, pts: np.ndarray):
    d, idx = tree.query(pts)
    inl = d <= REJECT_FACTOR * np.median(d)
    if inl.sum() < 3:
        raise DivergenceError("fewer than three ICP correspondences survive rejection")
    return float(np.sqrt(np.mean(d[inl] ** 2))), idx, inl


def icp_register(moving: Grid, fixed: Grid, max_iters: int = 50, tol: float = 1e-4,
                 history: list | None = None, densify: int = DENSIFY) -> tuple[RigidTransform, float]:
    """Rigid transform taking ``moving`` onto ``fixed`` by point-to-point ICP.

    The moving cloud holds the valid cell centers of ``moving`` (at most
    50,000, thinned by stride). The fixed cloud is sampled from ``fixed``
    bilinearly at ``densify`` times its resolution: with both clouds on the
    same lattice, nearest neighbours favour grid-aligned poses over the true
    one. An odd factor keeps the original cell centers in the fixed cloud, so
    a grid registers exactly onto itself.

    Each iteration matches every moving point to its nearest fixed point,
    drops pairs farther than 3x the median distance, and solves for the best
    rigid motion by SVD. An update is accepted only if it does not raise the
    correspondence RMSE; iteration stops once the gain falls below ``tol``.

    If ``history`` is given, the RMSE before the first and after every
    accepted iteration is appended to it.

    Raises:
        InsufficientDataError: fewer than 1000 valid cells in either grid.
        DivergenceError: the clouds do not overlap.
    """
    if moving.valid.sum() < MIN_ICP_CELLS or fixed.valid.sum() < MIN_ICP_CELLS:
        raise InsufficientDataError(f"ICP needs at least {MIN_ICP_CELLS} valid cells per grid")
    if densify < 1:
        raise ValueError("densify must be a positive integer")
    mov = grid_points(moving)
    dense = fixed if densify == 1 else resample_bilinear(fixed, fixed.header.cellsize / densify)
    fix = grid_points(dense, max_points=None)
    if not _boxes_overlap(mov, fix):
        raise DivergenceError("grid extents do not overlap")

    # work about the fixed centroid to keep map coordinates well conditioned
    origin = fix.mean(axis=0)
    mov_l = mov - origin
    fix_l = fix - origin
    tree = cKDTree(fix_l)

    current = RigidTransform.identity()
    rmse, idx, inl = _match(tree, mov_l)
    if history is not None:
        history.append(rmse)
    for _ in range(max_iters):
        moved = current.apply(mov_l)
        step = best_rigid(moved[inl], fix_l[idx[inl]])
        candidate = step.compose(current)
        moved_c = candidate.apply(mov_l)
        if not _boxes_overlap(moved_c, fix_l):
            raise DivergenceError("transformed grid no longer overlaps the fixed grid")
        new_rmse, new_idx, new_inl = _match(tree, moved_c)
        if new_rmse > rmse:
            break
        gain = rmse - new_rmse
        current, rmse, idx, inl = candidate, new_rmse, new_idx, new_inl
        if history is not None:
            history.append(rmse)
        if gain < tol:
            break

    to_local = RigidTransform(np.eye(3), -origin)
    from_local = RigidTransform(np.eye(3), origin)
    return from_local.compose(current.compose(to_local)), rmse


def apply_transform(grid: Grid, t: RigidTransform, target_geometry: GridHeader) -> Grid:
    """Move ``grid``'s surface by ``t`` and resample it onto ``target_geometry``.

    For each target cell center the source location that lands on it is found
    by inverting the horizontal part of the transform (a few fixed-point
    steps when the rotation tilts the surface); the source is interpolated
    bilinearly there. Target cells not covered by the source are nodata.
    """
    R, tr = t.rotation, t.translation
    A = R[:2, :2]
    c = R[:2, 2]
    if abs(np.linalg.det(A)) < 1e-12:
        raise ValueError("transform maps the surface edge-on; cannot regrid")
    A_inv = np.linalg.inv(A)

    X, Y = target_geometry.cell_centers()
    rhs = np.stack([X.ravel() - tr[0], Y.ravel() - tr[1]])
    p = A_inv @ rhs
    h = bilinear_sample(grid, p[0], p[1])
    if np.any(c != 0):
        for _ in range(8):
            p = A_inv @ (rhs - np.outer(c, np.nan_to_num(h)))
            h = bilinear_sample(grid, p[0], p[1])
    z = R[2, 0] * p[0] + R[2, 1] * p[1] + R[2, 2] * h + tr[2]
    return Grid(target_geometry, z.reshape(target_geometry.shape))
