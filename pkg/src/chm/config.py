"""Experiment configuration loader and validation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from src.chm.dataset import DatasetError, parse_transform


class ConfigError(Exception):
    """Raised when experiment configuration is missing or invalid."""


EXPERIMENTS = frozenset({"q10-sim", "q10-data", "lue-sim", "lue-data"})
METHODS = frozenset({"dml-rf", "dml-mlp", "dml-gbt", "gdhm", "gdhm-ta"})
REGULARIZATIONS = frozenset({"none", "dropout", "weight-decay"})
LEARNERS = frozenset({"linear", "gbt", "rf", "mlp"})
COMPOSITIONS = frozenset({"additive", "multiplicative-exp", "partition"})

DEFAULT_SAMPLE_SIZES = (250, 500, 1000, 2000, 4000, 8000, 16000)
DEFAULT_SIGMA_GRID = (0.0, 0.05, 0.1, 0.2, 0.4, 0.7, 1.0, 2.0)
PAPER_SCALE_REPLICATIONS = 100

_DEFAULT_METHODS = {
    "q10-sim": ("dml-rf", "dml-mlp", "gdhm", "gdhm-ta"),
    "q10-data": ("dml-rf",),
    "lue-sim": ("dml-gbt",),
    "lue-data": ("dml-gbt",),
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    methods: tuple[str, ...] = ()
    sample_sizes: tuple[int, ...] = DEFAULT_SAMPLE_SIZES
    replications: int = 20
    q10_values: tuple[float, ...] = (1.5,)
    regularization: str = "none"
    sigma_grid: tuple[float, ...] = DEFAULT_SIGMA_GRID
    seed: int = 0
    output_dir: str = "results"
    k_folds: int = 5
    fold_mode: str = "shuffle"
    driver_years: int = 1
    refit_rb: bool = False
    lue_transform: str = "hyperbola"
    # learners
    rf_trees: int = 30
    rf_max_depth: int | None = 10
    rf_min_samples_leaf: int = 20
    rf_feature_fraction: float = 1.0
    gbt_stages: int = 100
    gbt_learning_rate: float = 0.1
    gbt_max_depth: int = 3
    gbt_min_samples_leaf: int = 20
    gbt_subsample: float = 1.0
    mlp_iterations: int = 2000
    mlp_learning_rate: float = 1e-3
    gdhm_iterations: int = 10000
    gdhm_learning_rate: float = 1e-2
    # None starts the GDHM Q10 draw at the true Q10 of the run
    q10_init_mean: float | None = None
    rb_iterations: int = 10000
    save_history: bool = False
    # CSV runs
    csv_path: str | None = None
    y: str | None = None
    t: str | None = None
    x: tuple[str, ...] = ()
    w: tuple[str, ...] = ()
    transform: str = "identity"
    effect: str = "constant"
    composition: str | None = None
    y_learner: str = "gbt"
    t_learner: str = "gbt"
    final_learner: str = "gbt"
    g_estimator: str = "plugin"
    g_learner: str = "gbt"
    extra_predictors: tuple[str, ...] = ()
    measured_columns: tuple[str, ...] = ()
    qc_max: int = 0
    train_years: tuple[int, ...] = ()
    test_years: tuple[int, ...] = ()
    nighttime_only: bool = False
    log_target: bool = False
    include_vpd: bool = False


_KEYS = frozenset(f.name for f in fields(ExperimentConfig))


def _type_name(val: object) -> str:
    return type(val).__name__


def _require(data: dict, key: str) -> object:
    """Extract a required key, raising ConfigError if missing."""
    if key not in data:
        raise ConfigError(f"Missing required field '{key}'")
    return data[key]


def _get_int(data: dict, key: str, default: int, minimum: int | None = None) -> int:
    val = data.get(key, default)
    if not isinstance(val, int) or isinstance(val, bool):
        raise ConfigError(f"Field '{key}' must be an integer, got {_type_name(val)}")
    if minimum is not None and val < minimum:
        raise ConfigError(f"{key} must be >= {minimum}, got {val}")
    return val


def _get_float(
    data: dict, key: str, default: float, lo: float | None = None, hi: float | None = None
) -> float:
    val = data.get(key, default)
    if not isinstance(val, (int, float)) or isinstance(val, bool):
        raise ConfigError(f"Field '{key}' must be a number, got {_type_name(val)}")
    val = float(val)
    if (lo is not None and val < lo) or (hi is not None and val > hi):
        raise ConfigError(f"{key} must be in [{lo}, {hi}], got {val}")
    return val


def _get_bool(data: dict, key: str, default: bool) -> bool:
    val = data.get(key, default)
    if not isinstance(val, bool):
        raise ConfigError(f"Field '{key}' must be a boolean, got {_type_name(val)}")
    return val


def _get_str(data: dict, key: str, default: str | None, choices: frozenset | None = None):
    val = data.get(key, default)
    if val is None:
        return None
    if not isinstance(val, str):
        raise ConfigError(f"Field '{key}' must be a string, got {_type_name(val)}")
    if choices is not None and val not in choices:
        raise ConfigError(f"Unknown {key} '{val}'; valid values: {sorted(choices)}")
    return val


def _get_list(data: dict, key: str, default: tuple, item_type: type) -> tuple:
    val = data.get(key, default)
    if isinstance(val, tuple):
        return val
    if not isinstance(val, list):
        raise ConfigError(f"Field '{key}' must be a list, got {_type_name(val)}")
    out = []
    for i, item in enumerate(val):
        if item_type is float and isinstance(item, int) and not isinstance(item, bool):
            item = float(item)
        if not isinstance(item, item_type) or isinstance(item, bool):
            raise ConfigError(
                f"Item {i} of '{key}' must be {item_type.__name__}, got {_type_name(item)}"
            )
        out.append(item)
    return tuple(out)


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a flat mapping into an ExperimentConfig."""
    if not isinstance(raw, dict):
        raise ConfigError("Config file must contain a YAML mapping")
    unknown = sorted(set(raw) - _KEYS)
    if unknown:
        raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}")

    experiment = _require(raw, "experiment")
    if not isinstance(experiment, str) or experiment not in EXPERIMENTS:
        raise ConfigError(f"Unknown experiment {experiment!r}; valid values: {sorted(EXPERIMENTS)}")

    methods = _get_list(raw, "methods", _DEFAULT_METHODS[experiment], str)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"Unknown method(s) {bad}; valid values: {sorted(METHODS)}")
    if not methods:
        raise ConfigError("'methods' must not be empty")
    if experiment.startswith("lue") and any(m.startswith("gdhm") for m in methods):
        raise ConfigError("GDHM methods are only available for Q10 experiments")
    if len(set(methods)) != len(methods):
        raise ConfigError("Duplicate entries in 'methods'")

    sample_sizes = _get_list(raw, "sample_sizes", DEFAULT_SAMPLE_SIZES, int)
    if not sample_sizes or any(n < 10 for n in sample_sizes):
        raise ConfigError("sample_sizes must be a non-empty list of integers >= 10")
    q10_values = _get_list(raw, "q10_values", (1.5,), float)
    if not q10_values or any(q <= 0 for q in q10_values):
        raise ConfigError("q10_values must be a non-empty list of numbers > 0")
    sigma_grid = _get_list(raw, "sigma_grid", DEFAULT_SIGMA_GRID, float)
    if not sigma_grid or any(s < 0 for s in sigma_grid):
        raise ConfigError("sigma_grid must be a non-empty list of numbers >= 0")

    rf_max_depth = raw.get("rf_max_depth", 10)
    if rf_max_depth is not None:
        rf_max_depth = _get_int(raw, "rf_max_depth", 10, minimum=1)

    transform = _get_str(raw, "transform", "identity")
    try:
        parse_transform(transform)
    except DatasetError as e:
        raise ConfigError(str(e)) from e

    effect = _get_str(raw, "effect", "constant", frozenset({"constant", "heterogeneous"}))
    x = _get_list(raw, "x", (), str)
    if effect == "heterogeneous" and experiment in ("q10-data",):
        raise ConfigError("q10-data estimates a constant Q10; effect must be 'constant'")

    composition = _get_str(raw, "composition", None, COMPOSITIONS)
    log_target = _get_bool(raw, "log_target", False)
    if log_target and composition == "multiplicative-exp":
        raise ConfigError(
            "log_target already logs the outcome; multiplicative-exp would log it twice "
            "(use composition: additive)"
        )

    return ExperimentConfig(
        experiment=experiment,
        methods=methods,
        sample_sizes=sample_sizes,
        replications=_get_int(raw, "replications", 20, minimum=1),
        q10_values=q10_values,
        regularization=_get_str(raw, "regularization", "none", REGULARIZATIONS),
        sigma_grid=sigma_grid,
        seed=_get_int(raw, "seed", 0, minimum=0),
        output_dir=_get_str(raw, "output_dir", "results"),
        k_folds=_get_int(raw, "k_folds", 5, minimum=2),
        fold_mode=_get_str(raw, "fold_mode", "shuffle", frozenset({"shuffle", "blocked"})),
        driver_years=_get_int(raw, "driver_years", 1, minimum=1),
        refit_rb=_get_bool(raw, "refit_rb", False),
        lue_transform=_get_str(
            raw, "lue_transform", "hyperbola", frozenset({"hyperbola", "identity"})
        ),
        rf_trees=_get_int(raw, "rf_trees", 30, minimum=1),
        rf_max_depth=rf_max_depth,
        rf_min_samples_leaf=_get_int(raw, "rf_min_samples_leaf", 20, minimum=1),
        rf_feature_fraction=_get_float(raw, "rf_feature_fraction", 1.0, lo=1e-9, hi=1.0),
        gbt_stages=_get_int(raw, "gbt_stages", 100, minimum=1),
        gbt_learning_rate=_get_float(raw, "gbt_learning_rate", 0.1, lo=1e-9, hi=1.0),
        gbt_max_depth=_get_int(raw, "gbt_max_depth", 3, minimum=1),
        gbt_min_samples_leaf=_get_int(raw, "gbt_min_samples_leaf", 20, minimum=1),
        gbt_subsample=_get_float(raw, "gbt_subsample", 1.0, lo=1e-9, hi=1.0),
        mlp_iterations=_get_int(raw, "mlp_iterations", 2000, minimum=1),
        mlp_learning_rate=_get_float(raw, "mlp_learning_rate", 1e-3, lo=1e-12),
        gdhm_iterations=_get_int(raw, "gdhm_iterations", 10000, minimum=1),
        gdhm_learning_rate=_get_float(raw, "gdhm_learning_rate", 1e-2, lo=1e-12),
        q10_init_mean=(
            None
            if raw.get("q10_init_mean") is None
            else _get_float(raw, "q10_init_mean", 1.5, lo=1e-6)
        ),
        rb_iterations=_get_int(raw, "rb_iterations", 10000, minimum=1),
        save_history=_get_bool(raw, "save_history", False),
        csv_path=_get_str(raw, "csv_path", None),
        y=_get_str(raw, "y", None),
        t=_get_str(raw, "t", None),
        x=x,
        w=_get_list(raw, "w", (), str),
        transform=transform,
        effect=effect,
        composition=composition,
        y_learner=_get_str(raw, "y_learner", "gbt", LEARNERS),
        t_learner=_get_str(raw, "t_learner", "gbt", LEARNERS),
        final_learner=_get_str(raw, "final_learner", "gbt", LEARNERS),
        g_estimator=_get_str(raw, "g_estimator", "plugin", frozenset({"plugin", "refit"})),
        g_learner=_get_str(raw, "g_learner", "gbt", LEARNERS),
        extra_predictors=_get_list(raw, "extra_predictors", (), str),
        measured_columns=_get_list(raw, "measured_columns", (), str),
        qc_max=_get_int(raw, "qc_max", 0, minimum=0),
        train_years=_get_list(raw, "train_years", (), int),
        test_years=_get_list(raw, "test_years", (), int),
        nighttime_only=_get_bool(raw, "nighttime_only", False),
        log_target=log_target,
        include_vpd=_get_bool(raw, "include_vpd", False),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    """Load and validate an experiment configuration from a flat YAML file.

    Raises:
        FileNotFoundError: If the config file does not exist.
        ConfigError: If keys are unknown, required fields are missing or
            values have invalid types or ranges.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path) as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Config file is not valid YAML: {e}") from e
    return parse_config(raw)


def config_id(path: str | Path) -> str:
    """Return SHA-256 hash of the config file content, truncated to 16 hex chars (64-bit)."""
    data = Path(path).read_bytes()
    return hashlib.sha256(data).hexdigest()[:16]
