"""Tests for chm.trees module."""

import numpy as np
import pytest

from src.chm.trees import GbtConfig, RfConfig, fit_forest, fit_gbt, fit_tree


def _step_data(n: int = 100):
    x = np.arange(n, dtype=float).reshape(-1, 1)
    y = (x[:, 0] >= n // 2).astype(float)
    return x, y, np.ones(n)


def _leaf_sizes(tree, x):
    node = np.zeros(x.shape[0], dtype=int)
    for _ in range(tree.n_nodes):
        internal = tree.feature[node] >= 0
        if not internal.any():
            break
        cur = node[internal]
        go_left = x[internal, tree.feature[cur]] <= tree.threshold[cur]
        node[internal] = np.where(go_left, tree.left[cur], tree.right[cur])
    return np.bincount(node)[np.bincount(node) > 0]


class TestFitTree:
    def test_step_function_single_split(self):
        x, y, w = _step_data()
        tree = fit_tree(x, y, w, max_depth=1, min_samples_leaf=1, rng=np.random.default_rng(0))
        assert tree.n_nodes == 3
        assert tree.threshold[0] == pytest.approx(49.5)
        np.testing.assert_array_equal(tree.predict(x), y)

    def test_depth_zero_is_weighted_mean(self):
        x, y, _ = _step_data()
        w = np.where(y == 1, 3.0, 1.0)
        tree = fit_tree(x, y, w, max_depth=0, min_samples_leaf=1, rng=np.random.default_rng(0))
        assert tree.n_nodes == 1
        assert tree.value[0] == pytest.approx(0.75)

    def test_constant_target_is_leaf(self):
        x = np.random.default_rng(0).normal(size=(50, 3))
        tree = fit_tree(x, np.full(50, 2.0), np.ones(50), None, 1, np.random.default_rng(0))
        assert tree.n_nodes == 1
        assert tree.value[0] == 2.0

    def test_tie_goes_to_lowest_feature(self):
        x, y, w = _step_data()
        both = np.hstack([x, x])
        tree = fit_tree(both, y, w, max_depth=1, min_samples_leaf=1, rng=np.random.default_rng(0))
        assert tree.feature[0] == 0

    def test_min_samples_leaf_respected(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(300, 2))
        y = np.sin(6 * x[:, 0]) + rng.normal(scale=0.1, size=300)
        tree = fit_tree(x, y, np.ones(300), max_depth=None, min_samples_leaf=25, rng=rng)
        assert _leaf_sizes(tree, x).min() >= 25

    def test_zero_weight_rows_ignored(self):
        x, y, w = _step_data()
        y = y.copy()
        y[:5] = 1000.0
        w = w.copy()
        w[:5] = 0.0
        tree = fit_tree(x, y, w, max_depth=1, min_samples_leaf=1, rng=np.random.default_rng(0))
        assert tree.predict(np.array([[0.0]]))[0] == pytest.approx(0.0)

    def test_max_features_subsamples_candidates(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(200, 4))
        y = x[:, 3]
        tree = fit_tree(x, y, np.ones(200), 1, 1, np.random.default_rng(0), max_features=1)
        assert tree.n_nodes == 3
        assert 0 <= tree.feature[0] < 4


class TestGradientBoosting:
    def test_stage_losses_decrease(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-2, 2, size=(400, 2))
        y = np.sin(x[:, 0]) + 0.5 * x[:, 1]
        model = fit_gbt(x, y, np.ones(400), GbtConfig(n_stages=50), np.random.default_rng(0))
        losses = np.array(model.stage_losses)
        assert losses.size == 51
        assert losses[0] == pytest.approx(np.var(y))
        assert np.all(np.diff(losses) <= 1e-12)

    def test_fits_smooth_function(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-2, 2, size=(1000, 1))
        y = np.sin(2 * x[:, 0])
        model = fit_gbt(
            x, y, np.ones(1000), GbtConfig(n_stages=200, min_samples_leaf=5),
            np.random.default_rng(0),
        )
        residual = model.predict(x) - y
        assert 1 - residual.var() / y.var() > 0.98

    def test_subsample_reproducible_by_seed(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(300, 2))
        y = x[:, 0] ** 2
        cfg = GbtConfig(n_stages=10, subsample=0.5)
        a = fit_gbt(x, y, np.ones(300), cfg, np.random.default_rng(5))
        b = fit_gbt(x, y, np.ones(300), cfg, np.random.default_rng(5))
        np.testing.assert_array_equal(a.predict(x), b.predict(x))


class TestRandomForest:
    def test_tree_count_and_determinism(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(200, 3))
        y = x[:, 0] + rng.normal(scale=0.1, size=200)
        cfg = RfConfig(n_trees=7, min_samples_leaf=5)
        a = fit_forest(x, y, np.ones(200), cfg, np.random.default_rng(3))
        b = fit_forest(x, y, np.ones(200), cfg, np.random.default_rng(3))
        assert len(a.trees) == 7
        np.testing.assert_array_equal(a.predict(x), b.predict(x))

    def test_without_bootstrap_trees_coincide(self):
        x, y, w = _step_data()
        cfg = RfConfig(n_trees=3, min_samples_leaf=1, bootstrap=False)
        forest = fit_forest(x, y, w, cfg, np.random.default_rng(0))
        preds = [t.predict(x) for t in forest.trees]
        np.testing.assert_array_equal(preds[0], preds[1])
        np.testing.assert_array_equal(forest.predict(x), preds[0])

    def test_bootstrap_trees_differ(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(200, 2))
        y = x[:, 0] + rng.normal(size=200)
        forest = fit_forest(x, y, np.ones(200), RfConfig(n_trees=2), np.random.default_rng(0))
        assert not np.array_equal(forest.trees[0].predict(x), forest.trees[1].predict(x))
