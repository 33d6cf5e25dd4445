"""End-to-end recovery checks on synthetic data. Run with ``pytest -m slow``."""

import numpy as np
import pytest

from src.chm.config import parse_config
from src.chm.experiments import run_lue_simulation, run_q10_simulation

pytestmark = pytest.mark.slow


def _q10_sweep(out_dir, **overrides):
    raw = {"experiment": "q10-sim", "output_dir": str(out_dir), **overrides}
    result = run_q10_simulation(parse_config(raw))
    assert result.n_failed == 0
    return result.records


def _estimates(records, method, n=None, q10=None):
    return np.array(
        [
            r.q10_hat
            for r in records
            if r.method == method
            and (n is None or r.n == n)
            and (q10 is None or r.q10_true == q10)
        ]
    )


@pytest.mark.parametrize("method", ["dml-rf", "dml-mlp"])
def test_dml_unbiased_and_tightening(out_dir, method):
    records = _q10_sweep(
        out_dir,
        methods=[method],
        sample_sizes=[4000, 16000],
        replications=20,
        q10_values=[1.5],
    )
    mid = _estimates(records, method, n=4000)
    large = _estimates(records, method, n=16000)
    assert mid.size == large.size == 20
    assert 1.45 <= mid.mean() <= 1.55
    assert large.std(ddof=1) <= 0.05


@pytest.mark.parametrize("regularization", ["dropout", "weight-decay"])
def test_regularized_gdhm_biased_above_dml(out_dir, regularization):
    records = _q10_sweep(
        out_dir,
        methods=["dml-mlp", "gdhm"],
        sample_sizes=[1000],
        replications=20,
        q10_values=[1.5],
        regularization=regularization,
    )
    dml_mean = _estimates(records, "dml-mlp").mean()
    gdhm_mean = _estimates(records, "gdhm").mean()
    assert abs(dml_mean - 1.5) < abs(gdhm_mean - 1.5)
    assert gdhm_mean > 1.5


def test_gdhm_with_ta_is_equifinal(out_dir):
    sizes = [1000, 4000]
    records = _q10_sweep(
        out_dir,
        methods=["gdhm", "gdhm-ta"],
        sample_sizes=sizes,
        replications=10,
        q10_values=[1.5],
        regularization="none",
    )
    pooled = _estimates(records, "gdhm-ta")
    assert 1.9 <= pooled.mean() <= 2.6
    for n in sizes:
        ta_sd = _estimates(records, "gdhm-ta", n=n).std(ddof=1)
        assert ta_sd > _estimates(records, "gdhm", n=n).std(ddof=1)


def test_dml_recovers_other_q10_values(out_dir):
    records = _q10_sweep(
        out_dir,
        methods=["dml-rf"],
        sample_sizes=[16000],
        replications=10,
        q10_values=[1.25, 1.75],
    )
    for q10 in (1.25, 1.75):
        half_width = 0.05 * q10 / 1.5
        assert q10 - half_width <= _estimates(records, "dml-rf", q10=q10).mean() <= q10 + half_width


# sigma: (GPP R², RECO R², NEE R², GPP RMSE) medians over site-years
LUE_REFERENCE = {
    0.0: (0.997, 0.940, 0.978, 0.320),
    0.2: (0.996, 0.936, 0.977, 0.401),
    1.0: (0.977, 0.887, 0.964, 1.005),
}


def test_flux_partitioning_quality(out_dir):
    cfg = parse_config(
        {
            "experiment": "lue-sim",
            "sigma_grid": sorted(LUE_REFERENCE),
            "replications": 10,
            "output_dir": str(out_dir),
        }
    )
    result = run_lue_simulation(cfg)
    assert result.n_failed == 0
    for sigma, (gpp_r2, reco_r2, nee_r2, gpp_rmse) in LUE_REFERENCE.items():
        runs = [r for r in result.records if r.sigma == sigma]
        assert len(runs) == 10
        assert np.median([r.gpp_r2 for r in runs]) == pytest.approx(gpp_r2, abs=0.03)
        assert np.median([r.reco_r2 for r in runs]) == pytest.approx(reco_r2, abs=0.05)
        assert np.median([r.nee_r2 for r in runs]) == pytest.approx(nee_r2, abs=0.05)
        assert np.median([r.gpp_rmse for r in runs]) == pytest.approx(gpp_rmse, rel=0.3)


def test_reco_recovered_without_noise(out_dir):
    cfg = parse_config(
        {
            "experiment": "lue-sim",
            "sigma_grid": [0.0],
            "replications": 3,
            "output_dir": str(out_dir),
        }
    )
    result = run_lue_simulation(cfg)
    assert result.n_failed == 0
    assert np.median([r.reco_r2 for r in result.records]) > 0.9
    assert min(r.gpp_r2 for r in result.records) > 0.9
