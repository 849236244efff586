"""Feed-forward regression network for per-pixel height-error prediction.

tanh hidden layers, identity output, z-scored inputs and targets. Trained by
mini-batch gradient descent with momentum on the sum of squared errors, with
early stopping on a held-out validation split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from demfuse.errors import DivergenceError, FeatureMismatchError, InsufficientDataError, ModelFormatError
from demfuse.features import FeatureTable
from demfuse.metrics import pearson_correlation
from demfuse.raster import Grid, GridHeader
from demfuse.refine import TrainingSet

MAGIC = "demfuse-mlp v1"
MOMENTUM = 0.9
MIN_TRAIN_SAMPLES = 100
ZERO_STD = 1e-12


@dataclass
class MlpModel:
    layer_sizes: list[int]
    weights: list[np.ndarray]  # layer l: (layer_sizes[l+1], layer_sizes[l])
    biases: list[np.ndarray]
    feature_names: list[str]
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    def __post_init__(self):
        sizes = self.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("one weight matrix and bias vector per layer transition")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[l + 1], sizes[l]) or b.shape != (sizes[l + 1],):
                raise ValueError(f"layer {l} parameters do not match sizes {sizes}")
        if len(self.feature_names) != sizes[0]:
            raise ValueError("one feature name per input")
        if np.any(np.asarray(self.x_std) <= 0) or self.y_std <= 0:
            raise ValueError("scaling standard deviations must be positive")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    def params(self) -> list[np.ndarray]:
        """Flat list [W0, b0, W1, b1, ...] of views on the parameters."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> MlpModel:
        return MlpModel(list(self.layer_sizes), [W.copy() for W in self.weights],
                        [b.copy() for b in self.biases], list(self.feature_names),
                        self.x_mean.copy(), self.x_std.copy(), self.y_mean, self.y_std)


def init_model(layer_sizes: Sequence[int], seed: int = 0, feature_names: Sequence[str] | None = None) -> MlpModel:
    """Glorot-uniform weights, zero biases, identity scaling."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 3:
        raise ValueError("need an input size, at least one hidden layer and the output size")
    if sizes[-1] != 1 or any(s < 1 for s in sizes):
        raise ValueError(f"invalid layer sizes {sizes}; the last layer must have one unit")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(sizes[0])]
    return MlpModel(sizes, weights, biases, names, np.zeros(sizes[0]), np.ones(sizes[0]))


def _forward_scaled(model: MlpModel, Z: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Network output in scaled space plus the activations of every layer."""
    acts = [Z]
    a = Z
    last = len(model.weights) - 1
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        a = a @ W.T + b
        if l < last:
            a = np.tanh(a)
        acts.append(a)
    return a[:, 0], acts


def _scale_x(model: MlpModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.n_inputs:
        raise ValueError(f"expected {model.n_inputs} features, got {X.shape[1]}")
    return (X - model.x_mean) / model.x_std


def predict_raw(model: MlpModel, X) -> np.ndarray:
    """De-standardized network output without the nonnegativity clamp."""
    out, _ = _forward_scaled(model, _scale_x(model, X))
    return out * model.y_std + model.y_mean


def predict(model: MlpModel, X) -> np.ndarray:
    """Predicted absolute height error (m) for each row of ``X``, clamped at 0."""
    return np.maximum(predict_raw(model, X), 0.0)


def forward(model: MlpModel, features) -> float:
    """Predicted absolute height error for a single feature vector."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward takes one feature vector; use predict for matrices")
    return float(predict(model, x)[0])


def loss_and_gradients(model: MlpModel, X, y) -> tuple[float, list[np.ndarray]]:
    """SSE in scaled space and its gradient for each array of ``model.params()``."""
    Z = _scale_x(model, X)
    t = (np.asarray(y, dtype=np.float64).ravel() - model.y_mean) / model.y_std
    if len(t) == 0 or len(t) != len(Z):
        raise ValueError("batch must be nonempty with one target per row")
    out, acts = _forward_scaled(model, Z)
    r = out - t
    sse = float(r @ r)

    grads: list[np.ndarray] = []
    delta = 2.0 * r[:, None]
    for l in range(len(model.weights) - 1, -1, -1):
        gW = delta.T @ acts[l]
        gb = delta.sum(axis=0)
        grads = [gW, gb] + grads
        if l > 0:
            delta = (delta @ model.weights[l]) * (1.0 - acts[l] ** 2)
    return sse, grads


def sse(model: MlpModel, X, y) -> float:
    Z = _scale_x(model, X)
    t = (np.asarray(y, dtype=np.float64).ravel() - model.y_mean) / model.y_std
    out, _ = _forward_scaled(model, Z)
    r = out - t
    return float(r @ r)


@dataclass
class TrainConfig:
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    max_epochs: int = 2000
    learning_rate: float = 0.01
    patience: int = 50
    seed: int = 0
    batch_size: int = 64
    hidden: tuple[int, ...] = (20,)

    def __post_init__(self):
        self.split = tuple(float(s) for s in self.split)
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.split) != 3 or any(s < 0 for s in self.split) or not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be three nonnegative numbers summing to 1, got {self.split}")
        if self.split[0] == 0 or self.split[1] == 0:
            raise ValueError("training and validation fractions must be positive")
        if self.max_epochs < 1 or not 0 <= self.patience < self.max_epochs:
            raise ValueError("need max_epochs >= 1 and 0 <= patience < max_epochs")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("at least one hidden layer with a positive width is required")


@dataclass
class TrainHistory:
    train_sse: list[float] = field(default_factory=list)
    val_sse: list[float] = field(default_factory=list)
    best_epoch: int = -1
    test_sse: float = float("nan")
    test_correlation: float = float("nan")
    dropped_features: list[str] = field(default_factory=list)
    train_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    val_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    test_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))

    @property
    def best_val_sse(self) -> float:
        return self.val_sse[self.best_epoch]

    def to_csv(self) -> str:
        lines = ["epoch,train_sse,val_sse"]
        lines += [f"{i},{a:.9g},{b:.9g}" for i, (a, b) in enumerate(zip(self.train_sse, self.val_sse))]
        return "\n".join(lines) + "\n"


def split_indices(n: int, split: Sequence[float], seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def train(ts: TrainingSet, config: TrainConfig | None = None) -> tuple[MlpModel, TrainHistory]:
    """Fit a network to a training set, keeping the best-validation parameters.

    Features with zero variance on the training split are dropped; their names
    are listed in ``history.dropped_features``.

    Raises:
        InsufficientDataError: fewer than 100 samples.
        DivergenceError: the training loss becomes non-finite.
    """
    config = config or TrainConfig()
    n = len(ts)
    if n < MIN_TRAIN_SAMPLES:
        raise InsufficientDataError(f"training needs at least {MIN_TRAIN_SAMPLES} samples, got {n}")
    tr, va, te = split_indices(n, config.split, config.seed)
    history = TrainHistory(train_idx=tr, val_idx=va, test_idx=te)

    X_all = ts.features
    x_mean = X_all[tr].mean(axis=0)
    x_std = X_all[tr].std(axis=0)
    active = x_std > ZERO_STD
    if not active.any():
        raise InsufficientDataError("every feature is constant on the training split")
    history.dropped_features = [nm for nm, a in zip(ts.feature_names, active) if not a]
    names = [nm for nm, a in zip(ts.feature_names, active) if a]
    X = X_all[:, active]
    y = ts.targets

    model = init_model([len(names), *config.hidden, 1], config.seed, names)
    model.x_mean = x_mean[active]
    model.x_std = x_std[active]
    model.y_mean = float(y[tr].mean())
    y_std = float(y[tr].std())
    model.y_std = y_std if y_std > ZERO_STD else 1.0

    rng = np.random.default_rng(config.seed + 1)
    velocity = [np.zeros_like(p) for p in model.params()]
    best = model.copy()
    best_val = math.inf
    stale = 0
    # overflow shows up as a non-finite loss, reported below as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.max_epochs):
            order = tr[rng.permutation(len(tr))]
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                _, grads = loss_and_gradients(model, X[batch], y[batch])
                step = config.learning_rate / len(batch)
                for p, v, g in zip(model.params(), velocity, grads):
                    v *= MOMENTUM
                    v -= step * g
                    p += v
            train_sse = sse(model, X[tr], y[tr])
            val_sse = sse(model, X[va], y[va])
            if not (math.isfinite(train_sse) and math.isfinite(val_sse)):
                raise DivergenceError(f"training diverged at epoch {epoch}")
            history.train_sse.append(train_sse)
            history.val_sse.append(val_sse)
            if val_sse < best_val:
                best_val = val_sse
                best = model.copy()
                history.best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break

    if len(te):
        history.test_sse = sse(best, X[te], y[te])
        if len(te) >= 2:
            try:
                history.test_correlation = pearson_correlation(predict(best, X[te]), y[te])
            except ValueError:
                pass
    return best, history


def table_matrix(model: MlpModel, table: FeatureTable) -> np.ndarray:
    """Columns of ``table`` in the order the model was trained on."""
    missing = [nm for nm in model.feature_names if nm not in table.names]
    if missing:
        raise FeatureMismatchError(f"feature table lacks model inputs {missing}")
    return table.values[:, [table.names.index(nm) for nm in model.feature_names]]


def predict_error_map(model: MlpModel, table: FeatureTable, geometry: GridHeader) -> Grid:
    """Grid of predicted absolute errors at the table's pixels, nodata elsewhere."""
    if table.shape != geometry.shape:
        raise ValueError(f"table shape {table.shape} does not match geometry {geometry.shape}")
    out = np.full(geometry.nrows * geometry.ncols, np.nan)
    if len(table):
        out[table.pixel_indices] = predict(model, table_matrix(model, table))
    return Grid(geometry, out.reshape(geometry.shape))


# --------------------------------------------------------------------------
# text serialization
# --------------------------------------------------------------------------

def _fmt(values) -> str:
    return " ".join(f"{float(v):.17g}" for v in np.ravel(values))


def dumps_model(model: MlpModel) -> str:
    lines = [
        MAGIC,
        " ".join(str(s) for s in model.layer_sizes),
        " ".join(model.feature_names),
        _fmt(model.x_mean),
        _fmt(model.x_std),
        _fmt([model.y_mean, model.y_std]),
    ]
    for W, b in zip(model.weights, model.biases):
        lines.append(_fmt(b))
        lines.append(_fmt(W))
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> MlpModel:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise ModelFormatError(f"not a model file (expected first line {MAGIC!r})")

    def floats(i, count, what):
        if i >= len(lines):
            raise ModelFormatError(f"model file truncated before {what}")
        try:
            vals = np.array([float(v) for v in lines[i].split()])
        except ValueError:
            raise ModelFormatError(f"non-numeric entry in {what}") from None
        if vals.size != count:
            raise ModelFormatError(f"{what}: expected {count} numbers, found {vals.size}")
        return vals

    try:
        sizes = [int(s) for s in lines[1].split()]
    except (IndexError, ValueError):
        raise ModelFormatError("missing or invalid layer sizes line") from None
    if len(sizes) < 3 or sizes[-1] != 1:
        raise ModelFormatError(f"invalid layer sizes {sizes}")
    if len(lines) < 3:
        raise ModelFormatError("model file truncated before feature names")
    names = lines[2].split()
    if len(names) != sizes[0]:
        raise ModelFormatError(f"{len(names)} feature names for {sizes[0]} inputs")
    x_mean = floats(3, sizes[0], "input means")
    x_std = floats(4, sizes[0], "input stds")
    y_mean, y_std = floats(5, 2, "target scaling")
    weights, biases = [], []
    i = 6
    for l in range(len(sizes) - 1):
        biases.append(floats(i, sizes[l + 1], f"layer {l} biases"))
        weights.append(floats(i + 1, sizes[l + 1] * sizes[l], f"layer {l} weights").reshape(sizes[l + 1], sizes[l]))
        i += 2
    if any(ln.strip() for ln in lines[i:]):
        raise ModelFormatError("trailing content after the last layer")
    try:
        return MlpModel(sizes, weights, biases, names, x_mean, x_std, float(y_mean), float(y_std))
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from None


def save_model(model: MlpModel, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> MlpModel:
    return loads_model(Path(path).read_text())
