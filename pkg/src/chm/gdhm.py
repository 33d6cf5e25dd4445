"""End-to-end gradient-descent hybrid model: R_eco = NN(X)·Q10^((TA − T_ref)/10).

The network weights and log Q10 are optimized jointly under one Adam state.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.chm.dataset import FluxFrame
from src.chm.learners import TrainedModel, TrainingDiagnostics, predict
from src.chm.mlp import (
    AdamConfig,
    AdamState,
    MlpModel,
    ValidationSplit,
    adam_step,
    dropout_masks,
    init_params,
    layer_sizes,
    mlp_backward,
    mlp_forward,
    standardize_stats,
    validation_split,
)

logger = logging.getLogger(__name__)


class GdhmError(Exception):
    """Raised when the joint Q10/network fit cannot run or diverges."""


@dataclass(frozen=True)
class GdhmConfig:
    predictors: tuple[str, ...] = ("SW_POT_sm", "SW_POT_sm_diff")
    target: str = "R_eco_syn"
    ta_column: str = "TA"
    include_ta_in_rb: bool = False
    t_ref: float = 15.0
    q10_init_mean: float = 1.5
    q10_init_sd: float = 0.1
    hidden_layers: tuple[int, ...] = (16, 16)
    dropout_rate: float = 0.0
    weight_decay: float = 0.0
    adam: AdamConfig = AdamConfig(learning_rate=1e-2)
    iterations: int = 10000
    validation_fraction: float = 0.2
    validation_split: ValidationSplit = "last"
    seed: int = 0

    @property
    def rb_predictors(self) -> tuple[str, ...]:
        if self.include_ta_in_rb and self.ta_column not in self.predictors:
            return (*self.predictors, self.ta_column)
        return self.predictors


@dataclass(frozen=True)
class GdhmHistory:
    """Per-iteration losses (original target units) and Q10 before each step."""

    train_loss: np.ndarray
    validation_loss: np.ndarray
    q10: np.ndarray


@dataclass(frozen=True)
class GdhmResult:
    q10_hat: float
    rb_model: TrainedModel
    history: GdhmHistory
    best_iteration: int
    q10_init: float

    def __iter__(self):
        return iter((self.q10_hat, self.rb_model, self.history))


def fit_gdhm(frame: FluxFrame, config: GdhmConfig) -> GdhmResult:
    """Jointly fit the base-respiration network and Q10 by Adam.

    Loss: mean((softplus NN · exp(θ_q·f) − y)²) + weight_decay·‖NN params‖²
    with θ_q = log Q10 and f = (TA − t_ref)/10. The returned parameters are
    the best validation-loss snapshot (initialization included).

    Raises:
        GdhmError: On non-positive or non-finite targets, or a non-finite
            loss (reported with its iteration index).
    """
    predictors = config.rb_predictors
    x = frame.matrix(predictors)
    y = np.array(frame.column(config.target))
    ta = frame.column(config.ta_column)
    if y.size < 2:
        raise GdhmError(f"Need at least 2 rows, got {y.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(ta))):
        raise GdhmError("Non-finite values in GDHM inputs")
    if np.any(y <= 0):
        raise GdhmError(
            f"Target '{config.target}' has non-positive values (row {int(np.argmax(y <= 0))})"
        )
    f = (ta - config.t_ref) / 10.0

    rng = np.random.default_rng(config.seed)
    train, val = validation_split(y.size, config.validation_fraction, config.validation_split, rng)
    x_mean, x_scale = standardize_stats(x[train])
    xs = (x - x_mean) / x_scale
    y_scale = float(np.sqrt(np.mean(y[train] ** 2)))
    ys = y / y_scale

    sizes = layer_sizes(x.shape[1], config.hidden_layers)
    nn = init_params(sizes, rng)
    q10_init = max(float(rng.normal(config.q10_init_mean, config.q10_init_sd)), 1e-3)
    params = np.concatenate([nn, [np.log(q10_init)]])
    n_nn = nn.size
    state = AdamState.zeros(params.size)

    x_tr, y_tr, f_tr = xs[train], ys[train], f[train]
    x_sel, y_sel, f_sel = (xs[val], ys[val], f[val]) if val.size else (x_tr, y_tr, f_tr)

    def selection_loss(p: np.ndarray) -> float:
        out, _ = mlp_forward(p[:n_nn], sizes, x_sel, "softplus")
        return float(np.mean((out * np.exp(p[n_nn] * f_sel) - y_sel) ** 2))

    train_hist = np.empty(config.iterations)
    val_hist = np.empty(config.iterations)
    q10_hist = np.empty(config.iterations)
    best_params = params.copy()
    best_loss = selection_loss(params)
    best_iteration = 0
    for it in range(config.iterations):
        nn_p, theta_q = params[:n_nn], params[n_nn]
        masks = dropout_masks(rng, train.size, config.hidden_layers, config.dropout_rate)
        out, cache = mlp_forward(nn_p, sizes, x_tr, "softplus", masks)
        scale = np.exp(theta_q * f_tr)
        pred = out * scale
        r = pred - y_tr
        loss = float(np.mean(r**2)) + config.weight_decay * float(np.dot(nn_p, nn_p))
        if not np.isfinite(loss):
            raise GdhmError(f"GDHM loss became non-finite at iteration {it}")
        d_pred = 2.0 * r / r.size
        grad = np.empty_like(params)
        grad[:n_nn] = mlp_backward(nn_p, sizes, cache, d_pred * scale, "softplus")
        grad[:n_nn] += 2.0 * config.weight_decay * nn_p
        grad[n_nn] = float(np.dot(d_pred, pred * f_tr))
        train_hist[it] = loss * y_scale**2
        q10_hist[it] = float(np.exp(theta_q))

        params, state = adam_step(params, grad, state, config.adam)
        current = selection_loss(params)
        val_hist[it] = current * y_scale**2
        if current < best_loss:
            best_loss, best_params, best_iteration = current, params.copy(), it + 1

    q10_hat = float(np.exp(best_params[n_nn]))
    nn_best = best_params[:n_nn]
    out, _ = mlp_forward(nn_best, sizes, x_tr, "softplus")
    rb = MlpModel(
        sizes=sizes,
        params=nn_best,
        x_mean=x_mean,
        x_scale=x_scale,
        y_mean=0.0,
        y_scale=y_scale,
        output="softplus",
        best_iteration=best_iteration,
        train_loss=float(np.mean((out * np.exp(np.log(q10_hat) * f_tr) - y_tr) ** 2)) * y_scale**2,
        validation_loss=best_loss * y_scale**2 if val.size else None,
    )
    rb_model = TrainedModel(
        kind="mlp",
        n_features=x.shape[1],
        state=rb,
        diagnostics=TrainingDiagnostics(
            train_loss=rb.train_loss,
            validation_loss=rb.validation_loss,
            best_iteration=best_iteration,
        ),
    )
    logger.debug(
        "GDHM: q10 %.4f -> %.4f (best iteration %d of %d)",
        q10_init,
        q10_hat,
        best_iteration,
        config.iterations,
    )
    return GdhmResult(
        q10_hat=q10_hat,
        rb_model=rb_model,
        history=GdhmHistory(train_loss=train_hist, validation_loss=val_hist, q10=q10_hist),
        best_iteration=best_iteration,
        q10_init=q10_init,
    )


def predict_gdhm(
    q10_hat: float,
    rb_model: TrainedModel,
    frame: FluxFrame,
    predictors: tuple[str, ...] = ("SW_POT_sm", "SW_POT_sm_diff"),
    ta_column: str = "TA",
    t_ref: float = 15.0,
) -> np.ndarray:
    """R_b(X)·Q10^((TA − t_ref)/10); ``predictors`` must match the fit."""
    rb = predict(rb_model, frame.matrix(predictors))
    return rb * q10_hat ** ((frame.column(ta_column) - t_ref) / 10.0)


def write_history_csv(history: GdhmHistory, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "train_loss", "validation_loss", "q10"])
        for i in range(history.train_loss.size):
            writer.writerow(
                [
                    i,
                    repr(float(history.train_loss[i])),
                    repr(float(history.validation_loss[i])),
                    repr(float(history.q10[i])),
                ]
            )
