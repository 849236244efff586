"""End-to-end steps shared by the command line and the test suites."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from demfuse.features import TERRAIN_KINDS, FeatureKind, extract_feature_table
from demfuse.fusion import DEFAULT_ERROR_FLOOR, fuse_by_errors
from demfuse.mlp import MlpModel, TrainConfig, TrainHistory, predict_error_map, train
from demfuse.raster import Grid, require_same_geometry
from demfuse.refine import TrainingSet, build_training_set


@dataclass
class TrainingPair:
    """One DEM with its reference surface and optional auxiliary layer."""

    dem: Grid
    reference: Grid
    aux: Grid | None = None


def model_kinds(model: MlpModel) -> list[FeatureKind]:
    return [FeatureKind.parse(nm) for nm in model.feature_names]


def training_set(pairs: Sequence[TrainingPair], kinds: Sequence[FeatureKind] = TERRAIN_KINDS,
                 min_count: int | None = None, refine: bool = True) -> TrainingSet:
    """Refined targets from every pair, pooled into one set (one general predictor)."""
    sets = []
    for p in pairs:
        require_same_geometry(p.dem, p.reference, *([p.aux] if p.aux is not None else []))
        sets.append(build_training_set(p.dem, p.reference, p.aux, kinds, min_count, refine))
    return sets[0] if len(sets) == 1 else TrainingSet.concat(sets)


def train_error_model(pairs: Sequence[TrainingPair], kinds: Sequence[FeatureKind] = TERRAIN_KINDS,
                      config: TrainConfig | None = None, min_count: int | None = None,
                      max_samples: int | None = None, refine: bool = True) -> tuple[MlpModel, TrainHistory]:
    """Train a network predicting absolute height error from terrain features.

    ``max_samples`` draws a seeded random subset of the pooled training set.
    """
    config = config or TrainConfig()
    ts = training_set(pairs, kinds, min_count, refine)
    if max_samples is not None and len(ts) > max_samples:
        ts = ts.sample(max_samples, config.seed)
    return train(ts, config)


def error_map(model: MlpModel, dem: Grid, aux: Grid | None = None) -> Grid:
    """Predicted absolute error per pixel of ``dem``; nodata where features are undefined."""
    kinds = model_kinds(model)
    if FeatureKind.AUX not in kinds:
        aux = None
    table = extract_feature_table(dem, aux, kinds)
    return predict_error_map(model, table, dem.header)


def ann_fuse(dem_a: Grid, dem_b: Grid, model_a: MlpModel, model_b: MlpModel,
             aux_a: Grid | None = None, aux_b: Grid | None = None,
             scheme: str = "inverse-square", floor: float = DEFAULT_ERROR_FLOOR) -> tuple[Grid, Grid, Grid]:
    """Fused DEM plus the two predicted error maps used to weight it."""
    require_same_geometry(dem_a, dem_b)
    err_a = error_map(model_a, dem_a, aux_a)
    err_b = error_map(model_b, dem_b, aux_b)
    return fuse_by_errors(dem_a, dem_b, err_a, err_b, scheme, floor), err_a, err_b
