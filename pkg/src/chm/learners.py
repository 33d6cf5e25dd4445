"""One fit/predict contract over linear, boosted-tree, forest and MLP regressors."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from src.chm.mlp import AdamConfig, MlpConfig, MlpModel, fit_mlp
from src.chm.trees import (
    GbtConfig,
    GradientBoostedTrees,
    RandomForest,
    RfConfig,
    fit_forest,
    fit_gbt,
)

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1


class LearnerError(Exception):
    """Raised when a learner is misconfigured or given unusable training data."""


@dataclass(frozen=True)
class LinearConfig:
    """Weighted least squares with an intercept."""


LearnerConfig = LinearConfig | GbtConfig | RfConfig | MlpConfig

_KINDS: dict[type, str] = {
    LinearConfig: "linear",
    GbtConfig: "gbt",
    RfConfig: "rf",
    MlpConfig: "mlp",
}


@dataclass(frozen=True)
class LearnerSpec:
    config: LearnerConfig
    seed: int = 0

    @property
    def kind(self) -> str:
        return _KINDS[type(self.config)]

    def with_seed(self, seed: int) -> LearnerSpec:
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class LinearModel:
    intercept: float
    coef: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.intercept + x @ self.coef

    def to_dict(self) -> dict:
        return {"intercept": self.intercept, "coef": self.coef.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> LinearModel:
        return cls(intercept=float(data["intercept"]), coef=np.asarray(data["coef"], dtype=float))


ModelState = LinearModel | GradientBoostedTrees | RandomForest | MlpModel

_STATE_TYPES: dict[str, type] = {
    "linear": LinearModel,
    "gbt": GradientBoostedTrees,
    "rf": RandomForest,
    "mlp": MlpModel,
}


@dataclass(frozen=True)
class TrainingDiagnostics:
    train_loss: float
    validation_loss: float | None = None
    constant_target: bool = False
    best_iteration: int | None = None


@dataclass(frozen=True)
class TrainedModel:
    kind: str
    n_features: int
    state: ModelState
    diagnostics: TrainingDiagnostics = field(compare=False)


def derive_seed(base_seed: int, *keys: int) -> int:
    """Independent 64-bit seed for a position in a nested loop (fold, replication, ...)."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _validate_config(config: LearnerConfig) -> None:
    if isinstance(config, GbtConfig):
        if config.n_stages < 1:
            raise LearnerError(f"GBT n_stages must be >= 1, got {config.n_stages}")
        if not 0.0 < config.learning_rate <= 1.0:
            raise LearnerError(f"GBT learning_rate must be in (0, 1], got {config.learning_rate}")
        if config.max_depth < 1 or config.min_samples_leaf < 1:
            raise LearnerError("GBT max_depth and min_samples_leaf must be >= 1")
        if not 0.0 < config.subsample <= 1.0:
            raise LearnerError(f"GBT subsample must be in (0, 1], got {config.subsample}")
    elif isinstance(config, RfConfig):
        if config.n_trees < 1:
            raise LearnerError(f"RF n_trees must be >= 1, got {config.n_trees}")
        if config.max_depth is not None and config.max_depth < 1:
            raise LearnerError("RF max_depth must be >= 1 or None")
        if config.min_samples_leaf < 1:
            raise LearnerError("RF min_samples_leaf must be >= 1")
        if not 0.0 < config.feature_fraction <= 1.0:
            raise LearnerError(
                f"RF feature_fraction must be in (0, 1], got {config.feature_fraction}"
            )
    elif isinstance(config, MlpConfig):
        if not config.hidden_layers or any(h < 1 for h in config.hidden_layers):
            raise LearnerError(f"MLP hidden widths must be positive, got {config.hidden_layers}")
        if not 0.0 <= config.dropout_rate < 1.0:
            raise LearnerError(f"MLP dropout_rate must be in [0, 1), got {config.dropout_rate}")
        if config.weight_decay < 0:
            raise LearnerError("MLP weight_decay must be >= 0")
        if not 0.0 <= config.validation_fraction < 1.0:
            raise LearnerError(
                f"MLP validation_fraction must be in [0, 1), got {config.validation_fraction}"
            )
        if config.iterations < 1:
            raise LearnerError("MLP iterations must be >= 1")
        if config.output_nonlinearity not in ("none", "softplus"):
            raise LearnerError(f"Unknown output nonlinearity '{config.output_nonlinearity}'")
    elif not isinstance(config, LinearConfig):
        raise LearnerError(f"Unknown learner config {type(config).__name__}")


def _check_features(features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise LearnerError(f"features must be a 2-D matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        row = int(np.argmax(~np.all(np.isfinite(x), axis=1)))
        raise LearnerError(f"Non-finite feature value in row {row}")
    return x


def fit(
    spec: LearnerSpec,
    features: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray | None = None,
) -> TrainedModel:
    """Train a regressor; identical (spec, data) gives an identical model.

    Weights are normalized to mean one, so scaling all weights by a constant
    leaves the model unchanged.

    Raises:
        LearnerError: On n < 2, p < 1, non-finite input, negative or all-zero
            weights, or an invalid config.
    """
    _validate_config(spec.config)
    x = _check_features(features)
    y = np.asarray(targets, dtype=np.float64)
    n, p = x.shape
    if n < 2:
        raise LearnerError(f"Need at least 2 training rows, got {n}")
    if p < 1:
        raise LearnerError("Need at least 1 feature column")
    if y.shape != (n,):
        raise LearnerError(f"targets has shape {y.shape}, expected ({n},)")
    if not np.all(np.isfinite(y)):
        raise LearnerError(f"Non-finite target value in row {int(np.argmax(~np.isfinite(y)))}")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,) or not np.all(np.isfinite(w)):
            raise LearnerError("weights must be a finite vector matching targets")
        if np.any(w < 0):
            raise LearnerError("weights must be nonnegative")
        if not np.any(w > 0):
            raise LearnerError("weights are all zero")
        w = w / w.mean()

    mean = float(np.dot(w, y) / w.sum())
    constant = bool(float(np.dot(w, (y - mean) ** 2)) <= 1e-24 * max(1.0, mean**2) * w.sum())
    if constant:
        logger.debug("%s fit on a constant target (%.6g)", spec.kind, mean)

    rng = np.random.default_rng(spec.seed)
    config = spec.config
    best_iteration = None
    validation_loss = None
    if isinstance(config, LinearConfig):
        state = _fit_linear(x, y, w)
    elif isinstance(config, GbtConfig):
        state = fit_gbt(x, y, w, config, rng)
    elif isinstance(config, RfConfig):
        state = fit_forest(x, y, w, config, rng)
    else:
        state = fit_mlp(x, y, w, config, rng)
        best_iteration = state.best_iteration
        validation_loss = state.validation_loss

    pred = state.predict(x)
    diagnostics = TrainingDiagnostics(
        train_loss=float(np.dot(w, (pred - y) ** 2) / w.sum()),
        validation_loss=validation_loss,
        constant_target=constant,
        best_iteration=best_iteration,
    )
    return TrainedModel(kind=spec.kind, n_features=p, state=state, diagnostics=diagnostics)


def _fit_linear(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> LinearModel:
    design = np.column_stack([np.ones(x.shape[0]), x])
    sw = np.sqrt(w)
    solution, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
    return LinearModel(intercept=float(solution[0]), coef=solution[1:])


def predict(model: TrainedModel, features: np.ndarray) -> np.ndarray:
    """Deterministic predictions; dropout is never active here."""
    x = _check_features(features)
    if x.shape[1] != model.n_features:
        raise LearnerError(
            f"Feature-count mismatch: model trained on {model.n_features}, got {x.shape[1]}"
        )
    return model.state.predict(x)


def save_model(model: TrainedModel, path: str | Path) -> None:
    """Write a model as versioned JSON."""
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": model.kind,
        "n_features": model.n_features,
        "state": model.state.to_dict(),
        "diagnostics": asdict(model.diagnostics),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1))


def load_model(path: str | Path) -> TrainedModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise LearnerError(f"Model file {path} is not valid JSON: {e}") from e
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise LearnerError(f"Unsupported model format_version {version!r} in {path}")
    kind = doc.get("kind")
    if kind not in _STATE_TYPES:
        raise LearnerError(f"Unknown model kind {kind!r} in {path}")
    return TrainedModel(
        kind=kind,
        n_features=int(doc["n_features"]),
        state=_STATE_TYPES[kind].from_dict(doc["state"]),
        diagnostics=TrainingDiagnostics(**doc.get("diagnostics", {"train_loss": float("nan")})),
    )


def make_spec(
    kind: str,
    seed: int = 0,
    *,
    gbt: GbtConfig | None = None,
    rf: RfConfig | None = None,
    mlp: MlpConfig | None = None,
) -> LearnerSpec:
    """Spec for a learner named ``linear``, ``gbt``, ``rf`` or ``mlp``."""
    if kind == "linear":
        return LearnerSpec(LinearConfig(), seed)
    if kind == "gbt":
        return LearnerSpec(gbt or GbtConfig(), seed)
    if kind == "rf":
        return LearnerSpec(rf or RfConfig(), seed)
    if kind == "mlp":
        return LearnerSpec(mlp or MlpConfig(), seed)
    raise LearnerError(f"Unknown learner '{kind}'; expected linear, gbt, rf or mlp")


__all__ = [
    "AdamConfig",
    "GbtConfig",
    "LearnerError",
    "LearnerSpec",
    "LinearConfig",
    "MlpConfig",
    "RfConfig",
    "TrainedModel",
    "TrainingDiagnostics",
    "derive_seed",
    "fit",
    "load_model",
    "make_spec",
    "predict",
    "save_model",
]
