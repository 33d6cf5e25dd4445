"""Weighted squared-error regression trees, gradient boosting and random forests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

# A split must remove at least this share of the node's weighted SSE.
_MIN_RELATIVE_GAIN = 1e-12


@dataclass(frozen=True)
class GbtConfig:
    n_stages: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3
    min_samples_leaf: int = 20
    subsample: float = 1.0


@dataclass(frozen=True)
class RfConfig:
    n_trees: int = 30
    max_depth: int | None = 10
    min_samples_leaf: int = 20
    feature_fraction: float = 1.0
    bootstrap: bool = True


@dataclass(frozen=True)
class RegressionTree:
    """Binary tree in flat arrays; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            f = self.feature[node]
            active = np.flatnonzero(f >= 0)
            if active.size == 0:
                return self.value[node]
            cur = node[active]
            go_left = x[active, f[active]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> RegressionTree:
        return cls(
            feature=np.asarray(data["feature"], dtype=np.int64),
            threshold=np.asarray(data["threshold"], dtype=np.float64),
            left=np.asarray(data["left"], dtype=np.int64),
            right=np.asarray(data["right"], dtype=np.int64),
            value=np.asarray(data["value"], dtype=np.float64),
        )


def _best_split(
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    features: np.ndarray,
    min_samples_leaf: int,
    node_sse: float,
) -> tuple[int, float, float] | None:
    """Exact greedy variance-reduction split: (feature, threshold, gain) or None.

    Ties go to the lowest feature index, then the lowest threshold.
    """
    n = y.shape[0]
    if n < 2 * min_samples_leaf:
        return None
    total_w = w.sum()
    total_wy = np.dot(w, y)
    best: tuple[int, float, float] | None = None
    lo = min_samples_leaf - 1
    hi = n - min_samples_leaf
    for j in features:
        order = np.argsort(x[:, j], kind="stable")
        xs = x[order, j]
        cw = np.cumsum(w[order])[lo:hi]
        cwy = np.cumsum(w[order] * y[order])[lo:hi]
        distinct = xs[lo:hi] < xs[lo + 1 : hi + 1]
        rw = total_w - cw
        valid = distinct & (cw > 0) & (rw > 0)
        if not np.any(valid):
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = cwy**2 / cw + (total_wy - cwy) ** 2 / rw - total_wy**2 / total_w
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] <= _MIN_RELATIVE_GAIN * node_sse:
            continue
        if best is None or gain[i] > best[2]:
            a, b = xs[lo + i], xs[lo + i + 1]
            threshold = 0.5 * (a + b)
            if threshold >= b:
                threshold = a
            best = (int(j), float(threshold), float(gain[i]))
    return best


def fit_tree(
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    max_depth: int | None,
    min_samples_leaf: int,
    rng: np.random.Generator,
    max_features: int | None = None,
) -> RegressionTree:
    """Grow a weighted regression tree depth-first.

    Rows with zero weight are ignored. ``max_features`` draws that many
    candidate features per split without replacement.
    """
    keep = w > 0
    x, y, w = x[keep], y[keep], w[keep]
    p = x.shape[1]
    k = p if max_features is None else max(1, min(p, max_features))

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    stack = [(new_node(), np.arange(y.shape[0]), 0)]
    while stack:
        node, rows, depth = stack.pop()
        wr, yr = w[rows], y[rows]
        mean = float(np.dot(wr, yr) / wr.sum())
        value[node] = mean
        if max_depth is not None and depth >= max_depth:
            continue
        node_sse = float(np.dot(wr, (yr - mean) ** 2))
        if node_sse <= 0.0:
            continue
        features = np.arange(p) if k == p else np.sort(rng.choice(p, size=k, replace=False))
        split = _best_split(x[rows], yr, wr, features, min_samples_leaf, node_sse)
        if split is None:
            continue
        j, t, _ = split
        goes_left = x[rows, j] <= t
        lnode, rnode = new_node(), new_node()
        feature[node], threshold[node] = j, t
        left[node], right[node] = lnode, rnode
        # right pushed first so the left subtree gets the lower node ids
        stack.append((rnode, rows[~goes_left], depth + 1))
        stack.append((lnode, rows[goes_left], depth + 1))

    return RegressionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
    )


@dataclass(frozen=True)
class GradientBoostedTrees:
    init: float
    learning_rate: float
    trees: tuple[RegressionTree, ...]
    stage_losses: tuple[float, ...] = field(default=(), compare=False)

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = np.full(x.shape[0], self.init)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(x)
        return out

    def to_dict(self) -> dict:
        return {
            "init": self.init,
            "learning_rate": self.learning_rate,
            "trees": [t.to_dict() for t in self.trees],
            "stage_losses": list(self.stage_losses),
        }

    @classmethod
    def from_dict(cls, data: dict) -> GradientBoostedTrees:
        return cls(
            init=float(data["init"]),
            learning_rate=float(data["learning_rate"]),
            trees=tuple(RegressionTree.from_dict(t) for t in data["trees"]),
            stage_losses=tuple(data.get("stage_losses", ())),
        )


def fit_gbt(
    x: np.ndarray, y: np.ndarray, w: np.ndarray, config: GbtConfig, rng: np.random.Generator
) -> GradientBoostedTrees:
    """Least-squares boosting from the weighted mean.

    ``stage_losses[i]`` is the weighted training MSE after i stages.
    """
    n = y.shape[0]
    total_w = w.sum()
    init = float(np.dot(w, y) / total_w)
    pred = np.full(n, init)
    losses = [float(np.dot(w, (y - pred) ** 2) / total_w)]
    n_sub = max(2, int(round(config.subsample * n)))
    trees = []
    for _ in range(config.n_stages):
        residual = y - pred
        if n_sub < n:
            rows = np.sort(rng.choice(n, size=n_sub, replace=False))
        else:
            rows = slice(None)
        tree = fit_tree(
            x[rows], residual[rows], w[rows], config.max_depth, config.min_samples_leaf, rng
        )
        pred = pred + config.learning_rate * tree.predict(x)
        trees.append(tree)
        losses.append(float(np.dot(w, (y - pred) ** 2) / total_w))
    logger.debug("GBT: %d stages, loss %.6g -> %.6g", config.n_stages, losses[0], losses[-1])
    return GradientBoostedTrees(
        init=init,
        learning_rate=config.learning_rate,
        trees=tuple(trees),
        stage_losses=tuple(losses),
    )


@dataclass(frozen=True)
class RandomForest:
    trees: tuple[RegressionTree, ...]

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape[0])
        for tree in self.trees:
            out += tree.predict(x)
        return out / len(self.trees)

    def to_dict(self) -> dict:
        return {"trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, data: dict) -> RandomForest:
        return cls(trees=tuple(RegressionTree.from_dict(t) for t in data["trees"]))


def fit_forest(
    x: np.ndarray, y: np.ndarray, w: np.ndarray, config: RfConfig, rng: np.random.Generator
) -> RandomForest:
    """Bagged trees; bootstrap draws enter as integer multiplicities on the weights."""
    n, p = x.shape
    max_features = max(1, int(round(config.feature_fraction * p)))
    trees = []
    for tree_rng in rng.spawn(config.n_trees):
        if config.bootstrap:
            counts = np.bincount(tree_rng.integers(0, n, size=n), minlength=n)
            tree_w = w * counts
        else:
            tree_w = w
        trees.append(
            fit_tree(
                x,
                y,
                tree_w,
                config.max_depth,
                config.min_samples_leaf,
                tree_rng,
                max_features=None if max_features == p else max_features,
            )
        )
    return RandomForest(trees=tuple(trees))
