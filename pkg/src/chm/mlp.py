"""Fully connected tanh networks on a flat parameter vector, trained with Adam.

Layout of the parameter vector: for each layer, the (fan_in, fan_out) weight
matrix in row-major order followed by its bias.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

logger = logging.getLogger(__name__)

OutputNonlinearity = Literal["none", "softplus"]
ValidationSplit = Literal["last", "random"]

# Targets whose weighted variance is below this (relative to their scale) are constant.
_CONSTANT_TARGET_RTOL = 1e-24


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_rate: float = 0.95
    decay_steps: int = 500


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(m=np.zeros(n), v=np.zeros(n), step=0)


def learning_rate_at(step: int, hyper: AdamConfig) -> float:
    """Staircase decay: lr · decay_rate^floor(step / decay_steps), step 0-based."""
    return hyper.learning_rate * hyper.decay_rate ** (step // hyper.decay_steps)


def adam_step(
    params: np.ndarray, gradient: np.ndarray, state: AdamState, hyper: AdamConfig
) -> tuple[np.ndarray, AdamState]:
    t = state.step + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * gradient
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * gradient**2
    m_hat = m / (1.0 - hyper.beta1**t)
    v_hat = v / (1.0 - hyper.beta2**t)
    lr = learning_rate_at(state.step, hyper)
    return params - lr * m_hat / (np.sqrt(v_hat) + hyper.epsilon), AdamState(m=m, v=v, step=t)


@dataclass(frozen=True)
class MlpConfig:
    hidden_layers: tuple[int, ...] = (16, 16)
    output_nonlinearity: OutputNonlinearity = "none"
    dropout_rate: float = 0.0
    weight_decay: float = 0.0
    adam: AdamConfig = AdamConfig()
    iterations: int = 2000
    validation_fraction: float = 0.2
    validation_split: ValidationSplit = "last"
    batch_size: int | None = None


# ── Network ───────────────────────────────────────────────────────


def layer_sizes(n_inputs: int, hidden_layers: tuple[int, ...]) -> tuple[int, ...]:
    return (n_inputs, *hidden_layers, 1)


def n_params(sizes: tuple[int, ...]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def unpack(params: np.ndarray, sizes: tuple[int, ...]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of (W, b) per layer into the flat vector."""
    layers = []
    offset = 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights = params[offset : offset + a * b].reshape(a, b)
        offset += a * b
        layers.append((weights, params[offset : offset + b]))
        offset += b
    return layers


def init_params(sizes: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Xavier-uniform weights, zero biases."""
    params = np.zeros(n_params(sizes))
    for weights, _ in unpack(params, sizes):
        fan_in, fan_out = weights.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights[...] = rng.uniform(-limit, limit, size=weights.shape)
    return params


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def dropout_masks(
    rng: np.random.Generator, n_rows: int, hidden_layers: tuple[int, ...], rate: float
) -> list[np.ndarray] | None:
    """Inverted-dropout masks (kept units scaled by 1/(1-rate)), one per hidden layer."""
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    return [(rng.random((n_rows, width)) < keep) / keep for width in hidden_layers]


@dataclass
class ForwardCache:
    activations: list[np.ndarray]  # layer inputs, dropout applied
    hidden: list[np.ndarray]  # tanh outputs before dropout
    masks: list[np.ndarray] | None
    pre_output: np.ndarray


def mlp_forward(
    params: np.ndarray,
    sizes: tuple[int, ...],
    x: np.ndarray,
    output: OutputNonlinearity = "none",
    masks: list[np.ndarray] | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    layers = unpack(params, sizes)
    a = x
    activations = [x]
    hidden = []
    for i, (weights, bias) in enumerate(layers[:-1]):
        h = np.tanh(a @ weights + bias)
        hidden.append(h)
        a = h * masks[i] if masks is not None else h
        activations.append(a)
    weights, bias = layers[-1]
    z = (a @ weights + bias)[:, 0]
    out = softplus(z) if output == "softplus" else z
    return out, ForwardCache(activations=activations, hidden=hidden, masks=masks, pre_output=z)


def mlp_backward(
    params: np.ndarray,
    sizes: tuple[int, ...],
    cache: ForwardCache,
    d_out: np.ndarray,
    output: OutputNonlinearity = "none",
) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. params given dLoss/dOutput per row."""
    grad = np.zeros_like(params)
    layers = unpack(params, sizes)
    grad_layers = unpack(grad, sizes)
    delta = d_out * sigmoid(cache.pre_output) if output == "softplus" else d_out
    delta = delta[:, None]
    for i in range(len(layers) - 1, -1, -1):
        a_prev = cache.activations[i]
        g_w, g_b = grad_layers[i]
        g_w[...] = a_prev.T @ delta
        g_b[...] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ layers[i][0].T
        if cache.masks is not None:
            delta = delta * cache.masks[i - 1]
        delta = delta * (1.0 - cache.hidden[i - 1] ** 2)
    return grad


def mlp_loss(
    params: np.ndarray,
    sizes: tuple[int, ...],
    x: np.ndarray,
    y: np.ndarray,
    config: MlpConfig,
    masks: list[np.ndarray] | None = None,
    weights: np.ndarray | None = None,
) -> float:
    """(Weighted) mean squared error plus weight_decay · ‖params‖²."""
    out, _ = mlp_forward(params, sizes, x, config.output_nonlinearity, masks)
    r2 = (out - y) ** 2
    data = float(np.mean(r2) if weights is None else np.dot(weights, r2) / weights.sum())
    return data + config.weight_decay * float(np.dot(params, params))


def mlp_gradient(
    params: np.ndarray,
    sizes: tuple[int, ...],
    x: np.ndarray,
    y: np.ndarray,
    config: MlpConfig,
    masks: list[np.ndarray] | None = None,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Exact backpropagation gradient of :func:`mlp_loss` for a fixed dropout mask."""
    out, cache = mlp_forward(params, sizes, x, config.output_nonlinearity, masks)
    if weights is None:
        d_out = 2.0 * (out - y) / y.shape[0]
    else:
        d_out = 2.0 * weights * (out - y) / weights.sum()
    grad = mlp_backward(params, sizes, cache, d_out, config.output_nonlinearity)
    return grad + 2.0 * config.weight_decay * params


# ── Training ──────────────────────────────────────────────────────


def validation_split(
    n: int, fraction: float, mode: ValidationSplit, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """(train_rows, validation_rows); the validation block is the last rows by default."""
    n_val = int(np.floor(fraction * n))
    if n_val < 1 or n - n_val < 1:
        return np.arange(n), np.empty(0, dtype=np.int64)
    if mode == "random":
        perm = rng.permutation(n)
        return np.sort(perm[n_val:]), np.sort(perm[:n_val])
    return np.arange(n - n_val), np.arange(n - n_val, n)


def standardize_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    return mean, np.where(scale > 0, scale, 1.0)


@dataclass(frozen=True)
class MlpModel:
    """Trained network with its input/target scaling.

    ``constant`` is set when the training target had no variance; the
    network is then bypassed.
    """

    sizes: tuple[int, ...]
    params: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    output: OutputNonlinearity = "none"
    constant: float | None = None
    best_iteration: int = field(default=0, compare=False)
    train_loss: float = field(default=float("nan"), compare=False)
    validation_loss: float | None = field(default=None, compare=False)

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.constant is not None:
            return np.full(x.shape[0], self.constant)
        z = (x - self.x_mean) / self.x_scale
        out, _ = mlp_forward(self.params, self.sizes, z, self.output)
        return out * self.y_scale + self.y_mean

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "params": self.params.tolist(),
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
            "output": self.output,
            "constant": self.constant,
            "best_iteration": self.best_iteration,
            "train_loss": self.train_loss,
            "validation_loss": self.validation_loss,
        }

    @classmethod
    def from_dict(cls, data: dict) -> MlpModel:
        return cls(
            sizes=tuple(int(s) for s in data["sizes"]),
            params=np.asarray(data["params"], dtype=np.float64),
            x_mean=np.asarray(data["x_mean"], dtype=np.float64),
            x_scale=np.asarray(data["x_scale"], dtype=np.float64),
            y_mean=float(data["y_mean"]),
            y_scale=float(data["y_scale"]),
            output=data.get("output", "none"),
            constant=data.get("constant"),
            best_iteration=int(data.get("best_iteration", 0)),
            train_loss=float(data.get("train_loss", float("nan"))),
            validation_loss=data.get("validation_loss"),
        )


def _weighted_mse(pred: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    return float(np.dot(w, (pred - y) ** 2) / w.sum())


def fit_mlp(
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    config: MlpConfig,
    rng: np.random.Generator,
) -> MlpModel:
    """Full-batch (or minibatch) Adam training keeping the best-validation snapshot.

    Inputs are z-scored with training statistics. Targets are centered and
    scaled; with a softplus output they are only scaled, by their RMS, so
    positivity survives.
    """
    train, val = validation_split(
        y.shape[0], config.validation_fraction, config.validation_split, rng
    )
    x_mean, x_scale = standardize_stats(x[train])
    xs = (x - x_mean) / x_scale
    w_train = w[train]
    mean = float(np.dot(w_train, y[train]) / w_train.sum())
    var = float(np.dot(w_train, (y[train] - mean) ** 2) / w_train.sum())
    sizes = layer_sizes(x.shape[1], config.hidden_layers)

    if var <= _CONSTANT_TARGET_RTOL * max(1.0, mean**2):
        val_loss = None
        if val.size:
            val_loss = _weighted_mse(np.full(val.size, mean), y[val], w[val])
        return MlpModel(
            sizes=sizes,
            params=np.zeros(n_params(sizes)),
            x_mean=x_mean,
            x_scale=x_scale,
            y_mean=mean,
            y_scale=1.0,
            output=config.output_nonlinearity,
            constant=mean,
            train_loss=var,
            validation_loss=val_loss,
        )

    if config.output_nonlinearity == "softplus":
        y_mean = 0.0
        y_scale = float(np.sqrt(np.dot(w_train, y[train] ** 2) / w_train.sum()))
    else:
        y_mean, y_scale = mean, float(np.sqrt(var))
    ys = (y - y_mean) / y_scale

    x_tr, y_tr = xs[train], ys[train]
    x_val, y_val, w_val = xs[val], ys[val], w[val]
    params = init_params(sizes, rng)
    state = AdamState.zeros(params.size)

    def selection_loss(p: np.ndarray) -> float:
        if val.size:
            out, _ = mlp_forward(p, sizes, x_val, config.output_nonlinearity)
            return _weighted_mse(out, y_val, w_val)
        out, _ = mlp_forward(p, sizes, x_tr, config.output_nonlinearity)
        return _weighted_mse(out, y_tr, w_train)

    best_params = params.copy()
    best_loss = selection_loss(params)
    best_iteration = 0
    for it in range(1, config.iterations + 1):
        if config.batch_size is not None and config.batch_size < train.size:
            batch = rng.choice(train.size, size=config.batch_size, replace=False)
        else:
            batch = slice(None)
        xb, yb, wb = x_tr[batch], y_tr[batch], w_train[batch]
        masks = dropout_masks(rng, xb.shape[0], config.hidden_layers, config.dropout_rate)
        grad = mlp_gradient(params, sizes, xb, yb, config, masks, wb)
        params, state = adam_step(params, grad, state, config.adam)
        loss = selection_loss(params)
        if not np.isfinite(loss):
            logger.warning("MLP training diverged at iteration %d; keeping best snapshot", it)
            break
        if loss < best_loss:
            best_loss, best_params, best_iteration = loss, params.copy(), it

    out, _ = mlp_forward(best_params, sizes, x_tr, config.output_nonlinearity)
    train_loss = _weighted_mse(out, y_tr, w_train) * y_scale**2
    logger.debug("MLP best snapshot at iteration %d of %d", best_iteration, config.iterations)
    return MlpModel(
        sizes=sizes,
        params=best_params,
        x_mean=x_mean,
        x_scale=x_scale,
        y_mean=y_mean,
        y_scale=y_scale,
        output=config.output_nonlinearity,
        best_iteration=best_iteration,
        train_loss=train_loss,
        validation_loss=best_loss * y_scale**2 if val.size else None,
    )
