"""Tests for chm.mlp module."""

import numpy as np
import pytest

from src.chm.mlp import (
    AdamConfig,
    AdamState,
    MlpConfig,
    adam_step,
    dropout_masks,
    fit_mlp,
    init_params,
    layer_sizes,
    learning_rate_at,
    mlp_gradient,
    mlp_loss,
    n_params,
    validation_split,
)


def _finite_difference(params, sizes, x, y, config, masks, weights, eps=1e-6):
    grad = np.zeros_like(params)
    for i in range(params.size):
        up, down = params.copy(), params.copy()
        up[i] += eps
        down[i] -= eps
        grad[i] = (
            mlp_loss(up, sizes, x, y, config, masks, weights)
            - mlp_loss(down, sizes, x, y, config, masks, weights)
        ) / (2 * eps)
    return grad


class TestGradient:
    @pytest.mark.parametrize("case", range(20))
    def test_backprop_matches_finite_differences(self, case):
        rng = np.random.default_rng(case)
        n_in = int(rng.integers(1, 4))
        hidden = tuple(int(h) for h in rng.integers(2, 6, size=int(rng.integers(1, 3))))
        config = MlpConfig(
            hidden_layers=hidden,
            output_nonlinearity="softplus" if case % 2 else "none",
            dropout_rate=0.3 if case % 3 == 0 else 0.0,
            weight_decay=0.05 if case % 4 == 0 else 0.0,
        )
        sizes = layer_sizes(n_in, hidden)
        params = init_params(sizes, rng)
        x = rng.normal(size=(12, n_in))
        y = rng.normal(size=12)
        masks = dropout_masks(rng, 12, hidden, config.dropout_rate)
        weights = rng.uniform(0.5, 2.0, size=12) if case % 5 == 0 else None

        analytic = mlp_gradient(params, sizes, x, y, config, masks, weights)
        numeric = _finite_difference(params, sizes, x, y, config, masks, weights)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        assert rel <= 1e-4


class TestAdam:
    def test_staircase_decay(self):
        hyper = AdamConfig(learning_rate=0.1)
        assert learning_rate_at(0, hyper) == pytest.approx(0.1)
        assert learning_rate_at(499, hyper) == pytest.approx(0.1)
        assert learning_rate_at(500, hyper) == pytest.approx(0.095)
        assert learning_rate_at(1000, hyper) == pytest.approx(0.1 * 0.95**2)

    def test_first_step_moves_by_learning_rate(self):
        hyper = AdamConfig(learning_rate=0.01)
        params = np.zeros(3)
        new, state = adam_step(params, np.array([5.0, -0.2, 1e3]), AdamState.zeros(3), hyper)
        np.testing.assert_allclose(new, [-0.01, 0.01, -0.01], rtol=1e-6)
        assert state.step == 1


class TestHelpers:
    def test_param_count(self):
        assert n_params(layer_sizes(2, (16, 16))) == 2 * 16 + 16 + 16 * 16 + 16 + 16 + 1

    def test_validation_split_last_block(self):
        train, val = validation_split(10, 0.2, "last", np.random.default_rng(0))
        assert train.tolist() == list(range(8))
        assert val.tolist() == [8, 9]

    def test_validation_split_random_partitions_rows(self):
        train, val = validation_split(50, 0.2, "random", np.random.default_rng(0))
        assert val.size == 10
        assert sorted(np.concatenate([train, val]).tolist()) == list(range(50))

    def test_no_validation_when_fraction_too_small(self):
        train, val = validation_split(4, 0.2, "last", np.random.default_rng(0))
        assert train.size == 4 and val.size == 0

    def test_dropout_masks(self):
        assert dropout_masks(np.random.default_rng(0), 5, (3,), 0.0) is None
        (mask,) = dropout_masks(np.random.default_rng(0), 200, (8,), 0.5)
        assert set(np.unique(mask).tolist()) <= {0.0, 2.0}


class TestFitMlp:
    def test_learns_linear_function(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, size=(400, 1))
        y = 2.0 * x[:, 0] + 1.0
        config = MlpConfig(adam=AdamConfig(learning_rate=1e-2), iterations=1000)
        model = fit_mlp(x, y, np.ones(400), config, np.random.default_rng(0))
        residual = model.predict(x) - y
        assert np.sqrt(np.mean(residual**2)) < 0.05
        assert model.validation_loss is not None
        assert 0 < model.best_iteration <= 1000

    def test_constant_target_bypasses_network(self):
        x = np.random.default_rng(0).normal(size=(30, 2))
        model = fit_mlp(x, np.full(30, 4.0), np.ones(30), MlpConfig(), np.random.default_rng(0))
        assert model.constant == 4.0
        np.testing.assert_array_equal(model.predict(x[:3]), [4.0, 4.0, 4.0])

    def test_softplus_output_positive(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-2, 2, size=(200, 1))
        y = np.exp(x[:, 0])
        config = MlpConfig(output_nonlinearity="softplus", iterations=300)
        model = fit_mlp(x, y, np.ones(200), config, np.random.default_rng(0))
        assert np.all(model.predict(np.linspace(-10, 10, 50)[:, None]) >= 0)

    def test_same_seed_same_model(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(100, 2))
        y = x[:, 0] - x[:, 1]
        config = MlpConfig(iterations=50, dropout_rate=0.2, validation_split="random")
        a = fit_mlp(x, y, np.ones(100), config, np.random.default_rng(9))
        b = fit_mlp(x, y, np.ones(100), config, np.random.default_rng(9))
        np.testing.assert_array_equal(a.params, b.params)
