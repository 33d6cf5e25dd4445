"""Cross-fitted partialling-out, effect estimation and hybrid-model composition.

The fitted model has the form Y = θ(X)·f(T) + g(X, W). Compositions:

- ``additive``: as written.
- ``multiplicative-exp``: Y = g(X, W)·exp(θ·f(T)). The first stage works on
  log Y, so ``y_res`` and the plug-in g live on the log scale.
- ``partition``: Y = −θ(X)·f(T) + g(X, W). The treatment enters negated so
  θ is a positive light-use efficiency and g is respiration.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from joblib import Parallel, delayed

from src.chm.dataset import FluxFrame, RoleSpec, TreatmentTransform
from src.chm.learners import LearnerError, LearnerSpec, TrainedModel, derive_seed, fit, predict

logger = logging.getLogger(__name__)

Composition = Literal["additive", "multiplicative-exp", "partition"]
FoldMode = Literal["shuffle", "blocked"]
COMPOSITIONS: tuple[str, ...] = ("additive", "multiplicative-exp", "partition")

SUMMARY_FORMAT_VERSION = 1
DEFAULT_K_FOLDS = 5
Z_95 = 1.96


class DmlError(Exception):
    """Raised when partialling-out or effect estimation cannot proceed."""


def treatment_sign(composition: Composition) -> float:
    return -1.0 if composition == "partition" else 1.0


@dataclass(frozen=True)
class FoldDiagnostics:
    fold: int
    n_train: int
    n_test: int
    y_loss: float
    t_loss: float


@dataclass(frozen=True)
class PartialOutResult:
    """Out-of-fold residuals and the per-fold first-stage models."""

    y_res: np.ndarray
    t_res: np.ndarray
    fold_assignment: np.ndarray
    y_models: tuple[TrainedModel, ...] = ()
    t_models: tuple[TrainedModel, ...] = ()
    composition: Composition = "additive"
    control_columns: tuple[str, ...] = ()
    fold_diagnostics: tuple[FoldDiagnostics, ...] = field(default=(), compare=False)

    @property
    def k_folds(self) -> int:
        return int(self.fold_assignment.max()) + 1 if self.fold_assignment.size else 0

    @property
    def n(self) -> int:
        return int(self.y_res.shape[0])


@dataclass(frozen=True)
class ConstantEffect:
    theta: float
    std_error: float
    ci_95: tuple[float, float]
    n_used: int


@dataclass(frozen=True)
class HeterogeneousEffect:
    model: TrainedModel
    x_columns: tuple[str, ...]
    weight_floor: float = 0.0
    n_floored: int = 0


Effect = ConstantEffect | HeterogeneousEffect


def assign_folds(n: int, k_folds: int, seed: int, mode: FoldMode = "shuffle") -> np.ndarray:
    """Fold id per row: seeded uniform shuffle, or contiguous time blocks."""
    if mode == "blocked":
        return (np.arange(n) * k_folds // n).astype(np.int64)
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k_folds
    return folds


def first_stage_data(
    frame: FluxFrame, roles: RoleSpec, composition: Composition = "additive"
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(outcome, signed treatment, controls) on the scale the first stage fits."""
    roles.validate_for(frame)
    if composition not in COMPOSITIONS:
        raise DmlError(f"Unknown composition '{composition}'; expected one of {COMPOSITIONS}")
    outcome = np.array(frame.column(roles.y))
    if composition == "multiplicative-exp":
        if np.any(outcome <= 0):
            row = int(np.argmax(outcome <= 0))
            raise DmlError(
                f"Outcome '{roles.y}' must be positive for multiplicative-exp (row {row})"
            )
        outcome = np.log(outcome)
    treatment = treatment_sign(composition) * roles.treatment_values(frame)
    controls = frame.matrix(roles.controls)
    for name, values in (("outcome " + roles.y, outcome), ("treatment " + roles.t, treatment)):
        if not np.all(np.isfinite(values)):
            raise DmlError(f"Non-finite {name} in row {int(np.argmax(~np.isfinite(values)))}")
    return outcome, treatment, controls


def _fit_fold(
    fold: int,
    test: np.ndarray,
    controls: np.ndarray,
    outcome: np.ndarray,
    treatment: np.ndarray,
    y_learner: LearnerSpec,
    t_learner: LearnerSpec,
    seed: int,
) -> tuple[TrainedModel, TrainedModel]:
    train = ~test
    try:
        y_model = fit(
            y_learner.with_seed(derive_seed(seed, fold, 0)), controls[train], outcome[train]
        )
        t_model = fit(
            t_learner.with_seed(derive_seed(seed, fold, 1)), controls[train], treatment[train]
        )
    except LearnerError as e:
        raise DmlError(f"First-stage fit failed in fold {fold}: {e}") from e
    return y_model, t_model


def cross_fit(
    frame: FluxFrame,
    roles: RoleSpec,
    y_learner: LearnerSpec,
    t_learner: LearnerSpec,
    k_folds: int = DEFAULT_K_FOLDS,
    seed: int = 0,
    composition: Composition = "additive",
    fold_mode: FoldMode = "shuffle",
    n_jobs: int = 1,
) -> PartialOutResult:
    """Residualize outcome and f(T) on X ∪ W with K-fold cross-fitting.

    Every row's residual comes from models trained on the other folds.
    Residuals are returned in the frame's row order.
    """
    if k_folds < 2:
        raise DmlError(f"k_folds must be >= 2, got {k_folds}")
    n = len(frame)
    if n < 2 * k_folds:
        raise DmlError(f"Too few rows per fold: {n} rows for {k_folds} folds")
    outcome, treatment, controls = first_stage_data(frame, roles, composition)
    folds = assign_folds(n, k_folds, seed, fold_mode)

    models = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_fit_fold)(
            k, folds == k, controls, outcome, treatment, y_learner, t_learner, seed
        )
        for k in range(k_folds)
    )

    y_hat = np.empty(n)
    t_hat = np.empty(n)
    diagnostics = []
    for k, (y_model, t_model) in enumerate(models):
        test = folds == k
        y_hat[test] = predict(y_model, controls[test])
        t_hat[test] = predict(t_model, controls[test])
        fold_diag = FoldDiagnostics(
            fold=k,
            n_train=int(np.count_nonzero(~test)),
            n_test=int(np.count_nonzero(test)),
            y_loss=float(np.mean((outcome[test] - y_hat[test]) ** 2)),
            t_loss=float(np.mean((treatment[test] - t_hat[test]) ** 2)),
        )
        diagnostics.append(fold_diag)
        logger.debug(
            "Fold %d: n_test=%d y_mse=%.6g t_mse=%.6g",
            k,
            fold_diag.n_test,
            fold_diag.y_loss,
            fold_diag.t_loss,
        )

    return PartialOutResult(
        y_res=outcome - y_hat,
        t_res=treatment - t_hat,
        fold_assignment=folds,
        y_models=tuple(m[0] for m in models),
        t_models=tuple(m[1] for m in models),
        composition=composition,
        control_columns=roles.controls,
        fold_diagnostics=tuple(diagnostics),
    )


def estimate_constant_effect(po: PartialOutResult) -> ConstantEffect:
    """No-intercept least squares of y_res on t_res with a sandwich standard error."""
    t, y = po.t_res, po.y_res
    sxx = float(np.dot(t, t))
    if not np.isfinite(sxx) or sxx <= 0.0:
        raise DmlError(
            "Residualized treatment has zero variance; the effect is not identifiable "
            "(treatment fully explained by the controls)"
        )
    theta = float(np.dot(t, y)) / sxx
    e = y - theta * t
    se = float(np.sqrt(np.dot(t**2, e**2))) / sxx
    return ConstantEffect(
        theta=theta,
        std_error=se,
        ci_95=(theta - Z_95 * se, theta + Z_95 * se),
        n_used=po.n,
    )


def estimate_heterogeneous_effect(
    po: PartialOutResult,
    x: np.ndarray,
    final_learner: LearnerSpec,
    weight_floor: float | None = None,
    x_columns: tuple[str, ...] = (),
) -> HeterogeneousEffect:
    """Fit θ(X) by regressing y_res/t_res on X with weights t_res².

    Rows with |t_res| below the floor (default 1e-3·sd(t_res)) use the floor
    in place of t_res. The final stage is fit on all residuals.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != po.n:
        raise DmlError(f"x must be an ({po.n}, p) matrix, got shape {x.shape}")
    t = po.t_res
    floor = 1e-3 * float(np.std(t)) if weight_floor is None else float(weight_floor)
    if not floor > 0:
        raise DmlError("Weight floor must be positive; residualized treatment has no spread")
    small = np.abs(t) < floor
    if np.all(small):
        raise DmlError("All residualized treatments are below the weight floor")
    t_eff = np.where(small, np.where(t < 0, -floor, floor), t)
    pseudo = po.y_res / t_eff
    try:
        model = fit(final_learner, x, pseudo, weights=t_eff**2)
    except LearnerError as e:
        raise DmlError(f"Final-stage fit failed: {e}") from e
    n_floored = int(np.count_nonzero(small))
    if n_floored:
        logger.debug("%d of %d rows at the weight floor %.3g", n_floored, po.n, floor)
    return HeterogeneousEffect(
        model=model, x_columns=tuple(x_columns), weight_floor=floor, n_floored=n_floored
    )


def theta_at(effect: Effect, x: np.ndarray) -> np.ndarray:
    """θ̂ per row of ``x``."""
    if isinstance(effect, ConstantEffect):
        return np.full(np.asarray(x).shape[0], effect.theta)
    return predict(effect.model, x)


def ensemble_predict(models: tuple[TrainedModel, ...], controls: np.ndarray) -> np.ndarray:
    """Mean prediction over the fold models."""
    if not models:
        raise DmlError("No first-stage models to ensemble")
    out = np.zeros(controls.shape[0])
    for model in models:
        out += predict(model, controls)
    return out / len(models)


def plugin_g(
    po: PartialOutResult, effect: Effect, rows: np.ndarray, x: np.ndarray | None = None
) -> np.ndarray:
    """ĝ = Ê[Y|X,W] − θ̂(X)·Ê[f(T)|X,W] with fold-ensembled first stages.

    ``rows`` holds the controls (X then W); ``x`` is needed for a
    heterogeneous effect. The result is on the first-stage scale: log scale
    for multiplicative-exp. For partition the t models predict −f(T), so ĝ is
    Ê[Y|X,W] + θ̂·Ê[f(T)|X,W], the respiration term.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if isinstance(effect, HeterogeneousEffect) and x is None:
        raise DmlError("plugin_g needs x rows for a heterogeneous effect")
    theta = theta_at(effect, rows if x is None else x)
    return ensemble_predict(po.y_models, rows) - theta * ensemble_predict(po.t_models, rows)


# ── g estimators ──────────────────────────────────────────────────


@dataclass(frozen=True)
class PlugIn:
    """g from the cross-fit's own first-stage models."""

    y_models: tuple[TrainedModel, ...]
    t_models: tuple[TrainedModel, ...]
    effect: Effect
    composition: Composition
    roles: RoleSpec

    def predict(self, frame: FluxFrame) -> np.ndarray:
        po = PartialOutResult(
            y_res=np.empty(0),
            t_res=np.empty(0),
            fold_assignment=np.empty(0, dtype=np.int64),
            y_models=self.y_models,
            t_models=self.t_models,
            composition=self.composition,
        )
        controls = frame.matrix(self.roles.controls)
        g = plugin_g(po, self.effect, controls, frame.matrix(self.roles.x))
        return np.exp(g) if self.composition == "multiplicative-exp" else g


@dataclass(frozen=True)
class Refit:
    """g from a learner fitted to the outcome with the treatment term removed."""

    model: TrainedModel
    predictors: tuple[str, ...]

    def predict(self, frame: FluxFrame) -> np.ndarray:
        return predict(self.model, frame.matrix(self.predictors))


GEstimator = PlugIn | Refit


def make_plugin(po: PartialOutResult, effect: Effect, roles: RoleSpec) -> PlugIn:
    return PlugIn(
        y_models=po.y_models,
        t_models=po.t_models,
        effect=effect,
        composition=po.composition,
        roles=roles,
    )


def refit_g(
    frame: FluxFrame,
    roles: RoleSpec,
    effect: Effect,
    learner: LearnerSpec,
    extra_predictors: tuple[str, ...] = (),
    composition: Composition = "additive",
) -> Refit:
    """Fit g on Y − θ̂f (additive), Y + θ̂f (partition) or Y/exp(θ̂f) (multiplicative-exp).

    ``extra_predictors`` may include the treatment column itself.
    """
    predictors = tuple(dict.fromkeys((*roles.controls, *extra_predictors)))
    missing = [c for c in predictors if not frame.has_column(c)]
    if missing:
        raise DmlError(f"Refit predictor column(s) not in data: {', '.join(missing)}")
    y = frame.column(roles.y)
    f = roles.treatment_values(frame)
    theta = theta_at(effect, frame.matrix(roles.x))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if composition == "multiplicative-exp":
            target = y / np.exp(theta * f)
        elif composition == "partition":
            target = y + theta * f
        else:
            target = y - theta * f
    if not np.all(np.isfinite(target)):
        row = int(np.argmax(~np.isfinite(target)))
        raise DmlError(f"Refit target is non-finite at row {row} (exp under/overflow?)")
    try:
        model = fit(learner, frame.matrix(predictors), target)
    except LearnerError as e:
        raise DmlError(f"Refit of g failed: {e}") from e
    return Refit(model=model, predictors=predictors)


# ── Hybrid model ──────────────────────────────────────────────────


@dataclass(frozen=True)
class HybridModel:
    effect: Effect
    g_hat: GEstimator
    transform: TreatmentTransform
    composition: Composition
    roles: RoleSpec


def effect_term(model: HybridModel, frame: FluxFrame) -> np.ndarray:
    """θ̂(X)·f(T) per row (GPP for the partition composition)."""
    f = model.roles.treatment_values(frame)
    return theta_at(model.effect, frame.matrix(model.roles.x)) * f


def predict_hybrid(model: HybridModel, frame: FluxFrame) -> np.ndarray:
    f = model.roles.treatment_values(frame)
    theta = theta_at(model.effect, frame.matrix(model.roles.x))
    g = model.g_hat.predict(frame)
    if model.composition == "multiplicative-exp":
        return g * np.exp(theta * f)
    if model.composition == "partition":
        return -theta * f + g
    return theta * f + g


# ── Fit summary ───────────────────────────────────────────────────


@dataclass(frozen=True)
class ResidualDiagnostics:
    mean_y_res: float
    mean_t_res: float
    corr_residual_treatment: float | None


def residual_diagnostics(
    po: PartialOutResult, effect: Effect, x: np.ndarray | None = None
) -> ResidualDiagnostics:
    """Residual means and corr(y_res − θ̂·t_res, t_res); reported, never enforced."""
    if isinstance(effect, ConstantEffect):
        theta = effect.theta
    else:
        theta = theta_at(effect, x)
    e = po.y_res - theta * po.t_res
    corr = None
    if np.std(e) > 0 and np.std(po.t_res) > 0:
        corr = float(np.corrcoef(e, po.t_res)[0, 1])
    return ResidualDiagnostics(
        mean_y_res=float(np.mean(po.y_res)),
        mean_t_res=float(np.mean(po.t_res)),
        corr_residual_treatment=corr,
    )


def summary_record(
    po: PartialOutResult,
    effect: Effect,
    diagnostics: ResidualDiagnostics,
    extra: dict | None = None,
) -> dict:
    """Versioned plain-data record of a DML fit."""
    record: dict = {
        "format_version": SUMMARY_FORMAT_VERSION,
        "composition": po.composition,
        "k_folds": po.k_folds,
        "n": po.n,
        "controls": list(po.control_columns),
        "mean_y_res": diagnostics.mean_y_res,
        "mean_t_res": diagnostics.mean_t_res,
        "corr_residual_treatment": diagnostics.corr_residual_treatment,
        "folds": [
            {"fold": d.fold, "n_test": d.n_test, "y_mse": d.y_loss, "t_mse": d.t_loss}
            for d in po.fold_diagnostics
        ],
    }
    if isinstance(effect, ConstantEffect):
        record.update(
            effect="constant",
            theta=effect.theta,
            std_error=effect.std_error,
            ci_lo=effect.ci_95[0],
            ci_hi=effect.ci_95[1],
            exp_theta=float(np.exp(effect.theta)),
        )
    else:
        record.update(
            effect="heterogeneous",
            x_columns=list(effect.x_columns),
            final_learner=effect.model.kind,
            weight_floor=effect.weight_floor,
            n_floored=effect.n_floored,
        )
    record.update(extra or {})
    return record


def write_summary(record: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# ── Convenience ───────────────────────────────────────────────────


@dataclass(frozen=True)
class DmlSettings:
    y_learner: LearnerSpec
    t_learner: LearnerSpec
    final_learner: LearnerSpec | None = None  # None ⇒ constant effect
    g_learner: LearnerSpec | None = None  # None ⇒ plug-in g
    extra_predictors: tuple[str, ...] = ()
    composition: Composition = "additive"
    k_folds: int = DEFAULT_K_FOLDS
    fold_mode: FoldMode = "shuffle"
    seed: int = 0
    n_jobs: int = 1


@dataclass(frozen=True)
class DmlFit:
    partial_out: PartialOutResult
    effect: Effect
    model: HybridModel
    diagnostics: ResidualDiagnostics

    def summary(self, extra: dict | None = None) -> dict:
        return summary_record(self.partial_out, self.effect, self.diagnostics, extra)


def fit_hybrid(frame: FluxFrame, roles: RoleSpec, settings: DmlSettings) -> DmlFit:
    """Cross-fit, estimate the effect, then build g and the hybrid model."""
    po = cross_fit(
        frame,
        roles,
        settings.y_learner,
        settings.t_learner,
        k_folds=settings.k_folds,
        seed=settings.seed,
        composition=settings.composition,
        fold_mode=settings.fold_mode,
        n_jobs=settings.n_jobs,
    )
    x = frame.matrix(roles.x)
    if settings.final_learner is None:
        effect: Effect = estimate_constant_effect(po)
    else:
        if not roles.x:
            raise DmlError("A heterogeneous effect needs at least one x column")
        final = settings.final_learner.with_seed(derive_seed(settings.seed, settings.k_folds))
        effect = estimate_heterogeneous_effect(po, x, final, x_columns=roles.x)
    if settings.g_learner is None:
        g_hat: GEstimator = make_plugin(po, effect, roles)
    else:
        g_hat = refit_g(
            frame,
            roles,
            effect,
            settings.g_learner,
            settings.extra_predictors,
            settings.composition,
        )
    model = HybridModel(
        effect=effect,
        g_hat=g_hat,
        transform=roles.f,
        composition=settings.composition,
        roles=roles,
    )
    return DmlFit(
        partial_out=po,
        effect=effect,
        model=model,
        diagnostics=residual_diagnostics(po, effect, x),
    )
