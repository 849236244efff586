"""Run configuration read from ``key = value`` text files.

Blank lines and ``#`` comments are ignored. Recognised keys::

    features       = all | comma-separated kinds (slope, aspect, ..., aux)
    scheme         = inverse-square | one-minus-norm
    error_floor    = positive float
    min_count      = positive int (bins with fewer samples are discarded)
    hidden         = comma-separated layer widths, e.g. 20 or 20,10
    split          = train,validation,test fractions summing to 1
    max_epochs     = int
    learning_rate  = float
    patience       = int
    batch_size     = int
    max_samples    = int (random subset of the training set; 0 keeps all)
    seed           = int
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from demfuse.features import TERRAIN_KINDS, FeatureKind, parse_kinds
from demfuse.fusion import DEFAULT_ERROR_FLOOR, SCHEMES
from demfuse.mlp import TrainConfig


class ConfigError(ValueError):
    """Bad configuration file or value."""


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


_PARSERS = {
    "features": parse_kinds,
    "scheme": str.strip,
    "error_floor": float,
    "min_count": int,
    "hidden": _int_list,
    "split": _float_list,
    "max_epochs": int,
    "learning_rate": float,
    "patience": int,
    "batch_size": int,
    "max_samples": int,
    "seed": int,
}


@dataclass
class PipelineConfig:
    features: list[FeatureKind] = field(default_factory=lambda: list(TERRAIN_KINDS))
    scheme: str = "inverse-square"
    error_floor: float = DEFAULT_ERROR_FLOOR
    min_count: int | None = None
    hidden: tuple[int, ...] = (20,)
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    max_epochs: int = 2000
    learning_rate: float = 0.01
    patience: int = 50
    batch_size: int = 64
    max_samples: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.features:
            raise ConfigError("at least one feature kind is required")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not self.error_floor > 0:
            raise ConfigError("error_floor must be positive")
        if self.min_count is not None and self.min_count < 1:
            raise ConfigError("min_count must be positive")
        if self.max_samples < 0:
            raise ConfigError("max_samples must be nonnegative")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(split=self.split, max_epochs=self.max_epochs, learning_rate=self.learning_rate,
                           patience=self.patience, seed=self.seed, batch_size=self.batch_size,
                           hidden=self.hidden)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> PipelineConfig:
        """Build from raw strings or typed values; unknown keys are rejected."""
        kwargs = {}
        for key, raw in values.items():
            if key not in _PARSERS:
                raise ConfigError(f"unknown configuration key {key!r}")
            if isinstance(raw, str):
                try:
                    raw = _PARSERS[key](raw)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {exc}") from None
            kwargs[key] = raw
        return cls(**kwargs)

    def merged(self, overrides: Mapping[str, Any]) -> PipelineConfig:
        """Copy with ``overrides`` applied; ``None`` values are skipped."""
        current = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        current.update({k: v for k, v in overrides.items() if v is not None})
        return PipelineConfig.from_mapping(current)


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return PipelineConfig.from_mapping(parse_config_text(text))
