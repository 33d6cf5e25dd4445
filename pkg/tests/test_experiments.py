"""Tests for chm.experiments module: sweeps and CSV runs on tiny configs."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from src.chm import experiments
from src.chm.config import ConfigError, parse_config
from src.chm.dataset import FluxFrame, half_hourly_stamps, write_csv
from src.chm.experiments import (
    RoleError,
    csv_roles,
    lue_cells,
    q10_cells,
    run_lue_simulation,
    run_on_csv,
    run_q10_simulation,
)
from src.chm.synthgen import LueGenConfig, lue_from_drivers

TINY_LEARNERS = {
    "k_folds": 2,
    "rf_trees": 3,
    "rf_max_depth": 4,
    "rf_min_samples_leaf": 5,
    "gbt_stages": 5,
    "gdhm_iterations": 20,
    "mlp_iterations": 20,
}


def _q10_config(out_dir: Path, **overrides):
    raw = {
        "experiment": "q10-sim",
        "methods": ["dml-rf", "gdhm"],
        "sample_sizes": [100],
        "replications": 1,
        "output_dir": str(out_dir),
        **TINY_LEARNERS,
    }
    raw.update(overrides)
    return parse_config(raw)


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class TestCells:
    def test_methods_share_datasets(self, out_dir):
        cfg = _q10_config(out_dir, q10_values=[1.5, 2.0], sample_sizes=[100, 200], replications=2)
        cells = q10_cells(cfg)
        assert len(cells) == 2 * 2 * 2 * 2
        by_method = {m: [c for c in cells if c.method == m] for m in cfg.methods}
        rf, gdhm = by_method["dml-rf"], by_method["gdhm"]
        assert [c.data_seed for c in rf] == [c.data_seed for c in gdhm]
        assert all(a.model_seed != b.model_seed for a, b in zip(rf, gdhm))
        assert len({c.data_seed for c in rf}) == len(rf)

    def test_lue_reps_are_sites(self, out_dir):
        cfg = parse_config(
            {"experiment": "lue-sim", "sigma_grid": [0.0, 0.5], "replications": 2}
        )
        cells = lue_cells(cfg)
        assert len(cells) == 4
        rep0 = [c for c in cells if c.rep == 0]
        assert rep0[0].site_seed == rep0[1].site_seed
        assert rep0[0].noise_seed != rep0[1].noise_seed
        assert cells[0].site_seed != [c for c in cells if c.rep == 1][0].site_seed


class TestQ10Simulation:
    def test_writes_runs_summary_and_sidecar(self, out_dir):
        result = run_q10_simulation(_q10_config(out_dir), config_hash="abc123")
        assert result.n_failed == 0
        assert [r.method for r in result.records] == ["dml-rf", "gdhm"]
        for record in result.records:
            assert record.status == "ok"
            assert record.q10_hat > 0
            assert record.n == 100
        assert result.records[0].ci_lo < result.records[0].q10_hat < result.records[0].ci_hi
        assert result.records[0].rb_rmse is None
        assert result.records[1].rb_rmse is not None

        runs = _read_rows(out_dir / "q10_runs.csv")
        assert len(runs) == 2
        summary = _read_rows(out_dir / "q10_summary.csv")
        assert [(r["method"], r["metric"]) for r in summary] == [
            ("dml-rf", "q10_hat"),
            ("gdhm", "q10_hat"),
            ("gdhm", "rb_rmse"),
        ]
        sidecar = yaml.safe_load((out_dir / "q10_sim.yaml").read_text())
        assert sidecar["config_id"] == "abc123"
        assert sidecar["runs"] == 2
        assert sidecar["sample_sizes"] == [100]

    def test_same_seed_same_bytes(self, tmp_path):
        a = run_q10_simulation(_q10_config(tmp_path / "a"))
        b = run_q10_simulation(_q10_config(tmp_path / "b"))
        assert a.runs_path.read_bytes() == b.runs_path.read_bytes()
        assert a.summary_path.read_bytes() == b.summary_path.read_bytes()

    def test_failed_run_is_recorded_then_resumed(self, out_dir, monkeypatch):
        cfg = _q10_config(out_dir, methods=["dml-rf"])

        def boom(cell, train, held_out):
            raise RuntimeError("boom")

        monkeypatch.setattr(experiments, "_run_q10_dml", boom)
        result = run_q10_simulation(cfg)
        assert result.n_failed == 1
        assert result.records[0].status == "failed"
        assert result.records[0].error == "RuntimeError: boom"
        assert _read_rows(out_dir / "q10_summary.csv") == []

        monkeypatch.undo()
        resumed = run_q10_simulation(cfg, resume=True)
        assert resumed.n_failed == 0
        assert len(resumed.records) == 1
        assert resumed.records[0].status == "ok"

    def test_resume_skips_completed_runs(self, out_dir, monkeypatch):
        cfg = _q10_config(out_dir, methods=["gdhm"], replications=2)
        run_q10_simulation(cfg)
        runs_path = out_dir / "q10_runs.csv"
        lines = runs_path.read_text().splitlines()
        runs_path.write_text("\n".join(lines[:-1]) + "\n")

        calls = []
        original = experiments.run_q10_cell

        def counting(cell):
            calls.append(cell.cell)
            return original(cell)

        monkeypatch.setattr(experiments, "run_q10_cell", counting)
        result = run_q10_simulation(cfg, resume=True)
        assert calls == [("gdhm", 1.5, "none", 100, 1)]
        assert [r.rep for r in result.records] == [0, 1]

    def test_gdhm_q10_init_follows_true_q10(self, out_dir, monkeypatch):
        seen = []
        original = experiments.fit_gdhm

        def recording(frame, config):
            seen.append(config.q10_init_mean)
            return original(frame, config)

        monkeypatch.setattr(experiments, "fit_gdhm", recording)
        run_q10_simulation(_q10_config(out_dir, methods=["gdhm"], q10_values=[1.25, 1.75]))
        assert sorted(seen) == [1.25, 1.75]

    def test_gdhm_q10_init_override(self, out_dir, monkeypatch):
        seen = []
        original = experiments.fit_gdhm

        def recording(frame, config):
            seen.append(config.q10_init_mean)
            return original(frame, config)

        monkeypatch.setattr(experiments, "fit_gdhm", recording)
        cfg = _q10_config(out_dir, methods=["gdhm"], q10_values=[1.25, 1.75], q10_init_mean=2.0)
        run_q10_simulation(cfg)
        assert seen == [2.0, 2.0]

    def test_without_resume_runs_are_replaced(self, out_dir):
        cfg = _q10_config(out_dir, methods=["gdhm"])
        run_q10_simulation(cfg)
        result = run_q10_simulation(cfg)
        assert len(_read_rows(result.runs_path)) == 1

    def test_history_saved_on_request(self, out_dir):
        cfg = _q10_config(out_dir, methods=["gdhm"], save_history=True)
        run_q10_simulation(cfg)
        history = out_dir / "history" / "gdhm_history_gdhm_q1.5_n100_r0.csv"
        assert len(_read_rows(history)) == 20

    def test_refit_rb_reports_rmse(self, out_dir):
        cfg = _q10_config(out_dir, methods=["dml-rf"], refit_rb=True, rb_iterations=20)
        result = run_q10_simulation(cfg)
        assert result.records[0].rb_rmse is not None

    def test_sample_size_above_driver_rows(self, out_dir):
        with pytest.raises(ConfigError, match="exceed"):
            run_q10_simulation(_q10_config(out_dir, sample_sizes=[20000]))

    def test_wrong_experiment(self, out_dir):
        cfg = parse_config({"experiment": "lue-sim", "output_dir": str(out_dir)})
        with pytest.raises(ConfigError, match="q10-sim"):
            run_q10_simulation(cfg)


class TestLueSimulation:
    def test_scores_against_clean_fluxes(self, out_dir):
        cfg = parse_config(
            {
                "experiment": "lue-sim",
                "sigma_grid": [0.1],
                "replications": 1,
                "output_dir": str(out_dir),
                **TINY_LEARNERS,
            }
        )
        result = run_lue_simulation(cfg)
        assert result.n_failed == 0
        (record,) = result.records
        assert record.n_rows == 365 * 48
        assert record.gpp_r2 is not None and record.gpp_rmse > 0
        assert record.nee_noisy_rmse is not None
        metrics = {r["metric"] for r in _read_rows(out_dir / "lue_summary.csv")}
        assert {"gpp_r2", "reco_r2", "nee_r2", "nee_noisy_rmse"} <= metrics
        assert (out_dir / "lue_sim.yaml").exists()


def _linear_csv(path: Path, start: str = "2020-01-01T00:00", n: int = 200) -> Path:
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=n), rng.normal(size=n)
    t = 0.5 * x + rng.normal(size=n)
    y = 2.0 * t + x + w + rng.normal(size=n)
    frame = FluxFrame(
        timestamps=half_hourly_stamps(start, n), columns={"Y": y, "T": t, "X": x, "W": w}
    )
    write_csv(frame, path)
    return path


def _generic_config(out_dir: Path, **overrides):
    raw = {
        "experiment": "q10-sim",
        "y": "Y",
        "t": "T",
        "x": ["X"],
        "w": ["W"],
        "y_learner": "linear",
        "t_learner": "linear",
        "output_dir": str(out_dir),
    }
    raw.update(overrides)
    return parse_config(raw)


def _q10_data_csv(path: Path, q10_frame: FluxFrame, negative_nights: int = 0) -> Path:
    rows = slice(0, 60 * 48)
    nee = np.array(q10_frame.column("R_eco_syn")[rows])
    sw_pot = q10_frame.column("SW_POT")[rows]
    nee[np.flatnonzero(sw_pot <= 0)[:negative_nights]] = -3.0
    frame = FluxFrame(
        timestamps=q10_frame.timestamps[rows],
        columns={"TA": q10_frame.column("TA")[rows], "SW_POT": sw_pot, "NEE": nee},
    )
    write_csv(frame, path)
    return path


class TestRunOnCsv:
    def test_generic_constant_effect(self, out_dir, tmp_path):
        path = _linear_csv(tmp_path / "site.csv")
        result = run_on_csv(_generic_config(out_dir), path, config_hash="feed")
        summary = json.loads(result.summary_path.read_text())
        assert summary["effect"] == "constant"
        assert summary["theta"] == pytest.approx(2.0, abs=0.3)
        assert summary["n_used"] == 200
        assert summary["measured_fraction"] == 1.0
        assert summary["config_id"] == "feed"
        rows = _read_rows(result.predictions_path)
        assert len(rows) == 200
        assert {"Y", "y_hat", "residual", "g_hat", "effect_term"} <= set(rows[0])

    def test_year_split_scores_test_rows(self, out_dir, tmp_path):
        path = _linear_csv(tmp_path / "site.csv", start="2020-12-31T12:00")
        cfg = _generic_config(out_dir, train_years=[2021], test_years=[2020])
        result = run_on_csv(cfg, path)
        assert result.summary["test_n"] == 24
        assert result.summary["n"] == 176
        assert len(_read_rows(result.test_predictions_path)) == 24

    def test_refit_g_saves_model(self, out_dir, tmp_path):
        path = _linear_csv(tmp_path / "site.csv")
        cfg = _generic_config(out_dir, g_estimator="refit", g_learner="linear")
        run_on_csv(cfg, path)
        assert json.loads((out_dir / "g_model.json").read_text())["kind"] == "linear"

    def test_missing_role_column(self, out_dir, tmp_path):
        path = _linear_csv(tmp_path / "site.csv")
        with pytest.raises(RoleError, match="NOPE"):
            run_on_csv(_generic_config(out_dir, t="NOPE"), path)

    def test_overlapping_roles(self, out_dir, tmp_path):
        path = _linear_csv(tmp_path / "site.csv")
        with pytest.raises(RoleError, match="both x and w"):
            run_on_csv(_generic_config(out_dir, w=["X"]), path)

    def test_no_csv_given(self, out_dir):
        with pytest.raises(ConfigError, match="No CSV"):
            run_on_csv(_generic_config(out_dir))

    def test_csv_not_found(self, out_dir, tmp_path):
        with pytest.raises(FileNotFoundError):
            run_on_csv(_generic_config(out_dir), tmp_path / "absent.csv")

    def test_generic_roles_need_y_and_t(self, out_dir):
        cfg = parse_config({"experiment": "q10-sim", "t": "T"})
        with pytest.raises(ConfigError, match="'y' and 't'"):
            csv_roles(cfg)

    def test_q10_data_preset(self, out_dir, tmp_path, q10_frame):
        path = _q10_data_csv(tmp_path / "q10_site.csv", q10_frame)
        cfg = parse_config(
            {
                "experiment": "q10-data",
                "y_learner": "linear",
                "t_learner": "linear",
                "output_dir": str(out_dir),
            }
        )
        result = run_on_csv(cfg, path)
        assert result.summary["composition"] == "multiplicative-exp"
        assert result.summary["effect"] == "constant"
        assert result.summary["w"] == ["SW_POT_sm", "SW_POT_sm_diff"]
        assert result.summary["n_used"] < result.summary["n_loaded"]
        assert 1.0 < result.summary["exp_theta"] < 2.5

    def test_q10_data_log_target_logs_once(self, tmp_path, q10_frame):
        path = _q10_data_csv(tmp_path / "q10_site.csv", q10_frame, negative_nights=5)
        base = {"experiment": "q10-data", "y_learner": "linear", "t_learner": "linear"}
        exp_run = run_on_csv(parse_config({**base, "output_dir": str(tmp_path / "exp")}), path)
        log_run = run_on_csv(
            parse_config({**base, "log_target": True, "output_dir": str(tmp_path / "log")}), path
        )
        assert log_run.summary["composition"] == "additive"
        assert log_run.summary["y"] == "log_NEE"
        assert log_run.summary["n_used"] == exp_run.summary["n_used"]
        assert log_run.summary["exp_theta"] == pytest.approx(exp_run.summary["exp_theta"], rel=1e-9)

    def test_explicit_composition_overrides_preset(self, out_dir, tmp_path, q10_frame):
        path = _q10_data_csv(tmp_path / "q10_site.csv", q10_frame)
        cfg = parse_config(
            {
                "experiment": "q10-data",
                "composition": "additive",
                "y_learner": "linear",
                "t_learner": "linear",
                "output_dir": str(out_dir),
            }
        )
        result = run_on_csv(cfg, path)
        assert result.summary["composition"] == "additive"
        assert result.summary["y"] == "NEE"

    def test_lue_data_preset(self, out_dir, tmp_path, drivers):
        data = lue_from_drivers(drivers, LueGenConfig(sigma=0.0))
        rows = slice(120 * 48, 160 * 48)
        frame = FluxFrame(
            timestamps=data.timestamps[rows],
            columns={
                name: data.column(source)[rows]
                for name, source in [
                    ("NEE", "NEE_syn"),
                    ("SW_IN", "SW_IN"),
                    ("TA", "TA"),
                    ("VPD", "VPD"),
                    ("SW_POT", "SW_POT"),
                ]
            },
        )
        path = tmp_path / "lue_site.csv"
        write_csv(frame, path)
        cfg = parse_config(
            {"experiment": "lue-data", "output_dir": str(out_dir), **TINY_LEARNERS}
        )
        result = run_on_csv(cfg, path)
        assert result.summary["composition"] == "partition"
        assert result.summary["effect"] == "heterogeneous"
        assert result.summary["transform"] == "Precomputed"
        assert (out_dir / "light_response_windows.csv").exists()
        assert (out_dir / "effect_model.json").exists()
        assert "theta_hat" in _read_rows(result.predictions_path)[0]
