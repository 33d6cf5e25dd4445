"""Simulation sweeps and CSV runs behind the ``chm`` subcommands."""

from __future__ import annotations

import csv
import functools
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml
from joblib import Parallel, delayed

from src.chm.config import ConfigError, ExperimentConfig
from src.chm.dataset import (
    AffineScale,
    FluxFrame,
    Identity,
    Precomputed,
    RoleError,
    RoleSpec,
    add_log_column,
    derive_smoothed_radiation,
    filter_measured,
    load_csv,
    parse_transform,
    select_nighttime,
    split_by_year,
    write_csv,
)
from src.chm.dml import (
    ConstantEffect,
    DmlSettings,
    HybridModel,
    Refit,
    effect_term,
    fit_hybrid,
    predict_hybrid,
    refit_g,
    theta_at,
    write_summary,
)
from src.chm.drivers import DriverConfig, generate_drivers
from src.chm.gdhm import GdhmConfig, fit_gdhm, write_history_csv
from src.chm.learners import (
    AdamConfig,
    GbtConfig,
    LearnerSpec,
    MlpConfig,
    RfConfig,
    derive_seed,
    make_spec,
    predict,
    save_model,
)
from src.chm.lightcurve import fit_windows, transform_sw, write_windows_csv
from src.chm.metrics import score, summarize, write_summary_csv
from src.chm.storage import LueRunRecord, Q10RunRecord, ResultStorage
from src.chm.synthgen import LueGenConfig, Q10GenConfig, lue_from_drivers, q10_from_drivers

logger = logging.getLogger(__name__)

# Stable per-method seed keys, independent of which methods a config lists.
METHOD_KEYS = {"dml-rf": 1, "dml-mlp": 2, "dml-gbt": 3, "gdhm": 4, "gdhm-ta": 5}
RB_PREDICTORS = ("SW_POT_sm", "SW_POT_sm_diff")
HELD_OUT_ROWS = 2000
DROPOUT_RATE = 0.2
WEIGHT_DECAY = 0.1
LUE_WINDOW_DAYS = 15
LUE_CENTER_DAYS = 5
PRESET_COMPOSITIONS = {"q10-data": "multiplicative-exp", "lue-data": "partition"}


@dataclass(frozen=True)
class SweepResult:
    records: list
    summary_path: Path
    runs_path: Path
    n_failed: int
    plot_path: Path | None = None


# ── Learner construction ──────────────────────────────────────────


def _mlp_config(
    cfg: ExperimentConfig, output: str = "none", iterations: int | None = None
) -> MlpConfig:
    return MlpConfig(
        output_nonlinearity=output,
        dropout_rate=DROPOUT_RATE if cfg.regularization == "dropout" else 0.0,
        weight_decay=WEIGHT_DECAY if cfg.regularization == "weight-decay" else 0.0,
        adam=AdamConfig(learning_rate=cfg.mlp_learning_rate),
        iterations=iterations or cfg.mlp_iterations,
        validation_split="random",
    )


def learner_spec(kind: str, cfg: ExperimentConfig, seed: int = 0) -> LearnerSpec:
    """Learner of the given kind with the config's hyperparameters."""
    return make_spec(
        kind,
        seed,
        gbt=GbtConfig(
            n_stages=cfg.gbt_stages,
            learning_rate=cfg.gbt_learning_rate,
            max_depth=cfg.gbt_max_depth,
            min_samples_leaf=cfg.gbt_min_samples_leaf,
            subsample=cfg.gbt_subsample,
        ),
        rf=RfConfig(
            n_trees=cfg.rf_trees,
            max_depth=cfg.rf_max_depth,
            min_samples_leaf=cfg.rf_min_samples_leaf,
            feature_fraction=cfg.rf_feature_fraction,
        ),
        mlp=_mlp_config(cfg),
    )


def _method_learner(method: str) -> str:
    return method.removeprefix("dml-")


@functools.lru_cache(maxsize=8)
def _drivers(config: DriverConfig) -> FluxFrame:
    return generate_drivers(config)


def _sidecar(cfg: ExperimentConfig, path: Path, **extra) -> None:
    doc = {**asdict(cfg), **extra}
    for key, value in doc.items():
        if isinstance(value, tuple):
            doc[key] = list(value)
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=True)


def _run_cells(cfg: ExperimentConfig, storage: ResultStorage, cells, worker, jobs, resume):
    """Run pending cells through joblib and append each record in cell order."""
    done: set[tuple] = set()
    if resume:
        done = {r.cell for r in storage.read_all() if r.status == "ok"}
        if done:
            logger.info("Resuming: %d completed runs found in %s", len(done), storage.path)
    elif storage.path.exists():
        storage.path.unlink()
    storage.initialize()

    pending = [c for c in cells if c.cell not in done]
    results = Parallel(n_jobs=jobs, return_as="generator")(delayed(worker)(c) for c in pending)
    for record in results:
        storage.append(record)
    return storage.rewrite_sorted([c.cell for c in cells])


# ── Q10 simulation ────────────────────────────────────────────────


@dataclass(frozen=True)
class Q10Cell:
    method: str
    q10_true: float
    n: int
    rep: int
    data_seed: int
    model_seed: int
    cfg: ExperimentConfig = field(repr=False)

    @property
    def cell(self) -> tuple:
        return (self.method, self.q10_true, self.cfg.regularization, self.n, self.rep)


def q10_cells(cfg: ExperimentConfig) -> list[Q10Cell]:
    """Every (method, q10, n, rep) run in output order.

    The data seed depends on (q10, n, rep) only, so all methods see the
    same datasets.
    """
    cells = []
    for method in cfg.methods:
        for qi, q10 in enumerate(cfg.q10_values):
            for ni, n in enumerate(cfg.sample_sizes):
                for rep in range(cfg.replications):
                    data_seed = derive_seed(cfg.seed, qi, ni, rep)
                    cells.append(
                        Q10Cell(
                            method=method,
                            q10_true=q10,
                            n=n,
                            rep=rep,
                            data_seed=data_seed,
                            model_seed=derive_seed(data_seed, METHOD_KEYS[method]),
                            cfg=cfg,
                        )
                    )
    return cells


def _q10_dataset(cell: Q10Cell) -> tuple[FluxFrame, FluxFrame]:
    """(training subsample of n rows, held-out rows) from a fresh dataset."""
    cfg = cell.cfg
    drivers = _drivers(DriverConfig(years=cfg.driver_years, seed=cfg.seed))
    data = q10_from_drivers(drivers, Q10GenConfig(q10=cell.q10_true, seed=cell.data_seed))
    rng = np.random.default_rng(derive_seed(cell.data_seed, 0))
    order = rng.permutation(len(data))
    train = np.sort(order[: cell.n])
    held_out = np.sort(order[cell.n : cell.n + HELD_OUT_ROWS])
    return data.select(train), data.select(held_out)


def q10_roles() -> RoleSpec:
    """log R_eco = log R_b(SW_POT_sm, SW_POT_sm_diff) + log Q10 · (TA − 15)/10."""
    return RoleSpec(y="R_eco_syn", t="TA", w=RB_PREDICTORS, f=AffineScale(15.0, 10.0))


def _rb_rmse(model, held_out: FluxFrame, predictors: tuple[str, ...]) -> float | None:
    if len(held_out) < 2:
        return None
    rb_hat = predict(model, held_out.matrix(predictors))
    return score(rb_hat, held_out.column("R_b_syn")).rmse


def _run_q10_dml(cell: Q10Cell, train: FluxFrame, held_out: FluxFrame) -> Q10RunRecord:
    cfg = cell.cfg
    kind = _method_learner(cell.method)
    spec = learner_spec(kind, cfg, cell.model_seed)
    settings = DmlSettings(
        y_learner=spec,
        t_learner=spec,
        composition="multiplicative-exp",
        k_folds=cfg.k_folds,
        fold_mode=cfg.fold_mode,
        seed=cell.model_seed,
    )
    dml = fit_hybrid(train, q10_roles(), settings)
    effect = dml.effect
    rb_rmse = None
    if cfg.refit_rb:
        rb_spec = LearnerSpec(
            _mlp_config(cfg, output="softplus", iterations=cfg.rb_iterations),
            derive_seed(cell.model_seed, 1),
        )
        g = refit_g(train, q10_roles(), effect, rb_spec, composition="multiplicative-exp")
        rb_rmse = _rb_rmse(g.model, held_out, g.predictors)
    return Q10RunRecord(
        method=cell.method,
        q10_true=cell.q10_true,
        regularization=cfg.regularization,
        n=cell.n,
        rep=cell.rep,
        q10_hat=float(np.exp(effect.theta)),
        theta=effect.theta,
        std_error=effect.std_error,
        ci_lo=float(np.exp(effect.ci_95[0])),
        ci_hi=float(np.exp(effect.ci_95[1])),
        rb_rmse=rb_rmse,
        seed=cell.model_seed,
    )


def _run_q10_gdhm(cell: Q10Cell, train: FluxFrame, held_out: FluxFrame) -> Q10RunRecord:
    cfg = cell.cfg
    gcfg = GdhmConfig(
        include_ta_in_rb=cell.method == "gdhm-ta",
        q10_init_mean=cell.q10_true if cfg.q10_init_mean is None else cfg.q10_init_mean,
        dropout_rate=DROPOUT_RATE if cfg.regularization == "dropout" else 0.0,
        weight_decay=WEIGHT_DECAY if cfg.regularization == "weight-decay" else 0.0,
        adam=AdamConfig(learning_rate=cfg.gdhm_learning_rate),
        iterations=cfg.gdhm_iterations,
        validation_split="random",
        seed=cell.model_seed,
    )
    result = fit_gdhm(train, gcfg)
    if cfg.save_history:
        name = f"gdhm_history_{cell.method}_q{cell.q10_true}_n{cell.n}_r{cell.rep}.csv"
        write_history_csv(result.history, Path(cfg.output_dir) / "history" / name)
    return Q10RunRecord(
        method=cell.method,
        q10_true=cell.q10_true,
        regularization=cfg.regularization,
        n=cell.n,
        rep=cell.rep,
        q10_hat=result.q10_hat,
        theta=float(np.log(result.q10_hat)),
        rb_rmse=_rb_rmse(result.rb_model, held_out, gcfg.rb_predictors),
        seed=cell.model_seed,
    )


def run_q10_cell(cell: Q10Cell) -> Q10RunRecord:
    """One replication; failures come back as a ``failed`` record."""
    try:
        train, held_out = _q10_dataset(cell)
        if cell.method.startswith("gdhm"):
            record = _run_q10_gdhm(cell, train, held_out)
        else:
            record = _run_q10_dml(cell, train, held_out)
    except Exception as e:
        logger.warning(
            "Run %s q10=%s n=%d rep=%d failed", cell.method, cell.q10_true, cell.n, cell.rep,
            exc_info=True,
        )
        return Q10RunRecord(
            method=cell.method,
            q10_true=cell.q10_true,
            regularization=cell.cfg.regularization,
            n=cell.n,
            rep=cell.rep,
            status="failed",
            seed=cell.model_seed,
            error=f"{type(e).__name__}: {e}",
        )
    logger.info(
        "%s q10=%s n=%d rep=%d: Q10_hat=%.4f", cell.method, cell.q10_true, cell.n, cell.rep,
        record.q10_hat,
    )
    return record


def _check_sample_sizes(cfg: ExperimentConfig) -> None:
    available = len(_drivers(DriverConfig(years=cfg.driver_years, seed=cfg.seed)))
    too_big = [n for n in cfg.sample_sizes if n > available]
    if too_big:
        raise ConfigError(
            f"sample_sizes {too_big} exceed the {available} rows "
            f"of {cfg.driver_years} driver year(s)"
        )


def run_q10_simulation(
    cfg: ExperimentConfig, jobs: int = 1, resume: bool = False, config_hash: str = ""
) -> SweepResult:
    """Q10 recovery sweep over methods, true Q10 values, sample sizes and replications."""
    if cfg.experiment != "q10-sim":
        raise ConfigError(f"q10-sim needs experiment: q10-sim, got '{cfg.experiment}'")
    _check_sample_sizes(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    storage = ResultStorage(out / "q10_runs.csv", Q10RunRecord)
    cells = q10_cells(cfg)
    logger.info("Q10 sweep: %d runs, %d job(s)", len(cells), jobs)
    records = _run_cells(cfg, storage, cells, run_q10_cell, jobs, resume)

    ok = [asdict(r) for r in records if r.status == "ok"]
    keys = ("method", "q10_true", "regularization", "n")
    summaries = summarize(ok, keys, "q10_hat") if ok else []
    if any(r["rb_rmse"] is not None for r in ok):
        with_rmse = [r for r in ok if r["rb_rmse"] is not None]
        summaries += summarize(with_rmse, keys, "rb_rmse")
    summary_path = out / "q10_summary.csv"
    write_summary_csv(summaries, summary_path, keys)
    _sidecar(cfg, out / "q10_sim.yaml", config_id=config_hash, runs=len(records))

    n_failed = sum(r.status != "ok" for r in records)
    for s in summaries:
        if s.metric == "q10_hat":
            logger.info(
                "%s q10=%s n=%s: mean=%.4f sd=%s (%d runs)",
                s.key("method"), s.key("q10_true"), s.key("n"), s.mean, s.sd, s.count,
            )
    plot_path = _plot("plot_q10_sweep", summaries, out / "q10_sweep.svg")
    logger.info("Wrote %s and %s (%d failed)", storage.path, summary_path, n_failed)
    return SweepResult(records, summary_path, storage.path, n_failed, plot_path)


# ── LUE simulation ────────────────────────────────────────────────


@dataclass(frozen=True)
class LueCell:
    method: str
    sigma: float
    rep: int
    site_seed: int
    noise_seed: int
    model_seed: int
    cfg: ExperimentConfig = field(repr=False)

    @property
    def cell(self) -> tuple:
        return (self.method, self.sigma, self.rep)


def lue_cells(cfg: ExperimentConfig) -> list[LueCell]:
    """Every (method, sigma, rep) run; each rep is its own synthetic site-year."""
    cells = []
    for method in cfg.methods:
        for si, sigma in enumerate(cfg.sigma_grid):
            for rep in range(cfg.replications):
                site_seed = derive_seed(cfg.seed, rep)
                cells.append(
                    LueCell(
                        method=method,
                        sigma=sigma,
                        rep=rep,
                        site_seed=site_seed,
                        noise_seed=derive_seed(site_seed, si, 1),
                        model_seed=derive_seed(site_seed, si, METHOD_KEYS[method]),
                        cfg=cfg,
                    )
                )
    return cells


def lue_roles(transform: str = "hyperbola") -> RoleSpec:
    """NEE = −LUE(TA, VPD)·f(SW_IN) + RECO(TA, VPD, SW_POT_sm, SW_POT_sm_diff)."""
    f = Precomputed("f_SW") if transform == "hyperbola" else Identity()
    return RoleSpec(y="NEE", t="SW_IN", x=("TA", "VPD"), w=RB_PREDICTORS, f=f)


def partition_settings(cfg: ExperimentConfig, kind: str, seed: int) -> DmlSettings:
    spec = learner_spec(kind, cfg, seed)
    return DmlSettings(
        y_learner=spec,
        t_learner=spec,
        final_learner=spec,
        composition="partition",
        k_folds=cfg.k_folds,
        fold_mode=cfg.fold_mode,
        seed=seed,
    )


def _score_fields(prefix: str, estimate: np.ndarray, truth: np.ndarray) -> dict:
    s = score(estimate, truth)
    return {f"{prefix}_r2": s.r2, f"{prefix}_rmse": s.rmse, f"{prefix}_bias": s.bias}


def run_lue_cell(cell: LueCell) -> LueRunRecord:
    cfg = cell.cfg
    try:
        drivers = _drivers(DriverConfig(years=cfg.driver_years, seed=cell.site_seed))
        data = lue_from_drivers(drivers, LueGenConfig(sigma=cell.sigma, seed=cell.noise_seed))
        frame = data.with_columns({"NEE": data.column("NEE_syn")})
        skipped = 0
        if cfg.lue_transform == "hyperbola":
            fits = fit_windows(frame, "SW_IN", "NEE", LUE_WINDOW_DAYS, LUE_CENTER_DAYS)
            skipped = sum(w.status != "ok" for w in fits)
            f_sw = transform_sw(frame, LUE_WINDOW_DAYS, LUE_CENTER_DAYS, "SW_IN", "NEE", fits)
            frame = frame.with_columns({"f_SW": f_sw})
        dml = fit_hybrid(
            frame,
            lue_roles(cfg.lue_transform),
            partition_settings(cfg, _method_learner(cell.method), cell.model_seed),
        )
        gpp = effect_term(dml.model, frame)
        reco = dml.model.g_hat.predict(frame)
        nee = predict_hybrid(dml.model, frame)
        scores = {
            **_score_fields("gpp", gpp, frame.column("GPP_syn")),
            **_score_fields("reco", reco, frame.column("RECO_syn")),
            **_score_fields("nee", nee, frame.column("NEE_syn_clean")),
            **_score_fields("nee_noisy", nee, frame.column("NEE_syn")),
        }
    except Exception as e:
        logger.warning(
            "Run %s sigma=%s rep=%d failed", cell.method, cell.sigma, cell.rep, exc_info=True
        )
        return LueRunRecord(
            method=cell.method,
            sigma=cell.sigma,
            rep=cell.rep,
            status="failed",
            seed=cell.model_seed,
            error=f"{type(e).__name__}: {e}",
        )
    logger.info(
        "%s sigma=%s rep=%d: GPP R2=%s RMSE=%.3f",
        cell.method, cell.sigma, cell.rep, scores["gpp_r2"], scores["gpp_rmse"],
    )
    return LueRunRecord(
        method=cell.method,
        sigma=cell.sigma,
        rep=cell.rep,
        n_rows=len(frame),
        windows_skipped=skipped,
        seed=cell.model_seed,
        **scores,
    )


LUE_METRICS = tuple(
    f"{flux}_{s}" for flux in ("gpp", "reco", "nee", "nee_noisy") for s in ("r2", "rmse")
)


def run_lue_simulation(
    cfg: ExperimentConfig, jobs: int = 1, resume: bool = False, config_hash: str = ""
) -> SweepResult:
    """Flux-partitioning sweep over noise levels; scores against the generator's clean fluxes."""
    if cfg.experiment != "lue-sim":
        raise ConfigError(f"lue-sim needs experiment: lue-sim, got '{cfg.experiment}'")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    storage = ResultStorage(out / "lue_runs.csv", LueRunRecord)
    cells = lue_cells(cfg)
    logger.info("LUE sweep: %d runs, %d job(s)", len(cells), jobs)
    records = _run_cells(cfg, storage, cells, run_lue_cell, jobs, resume)

    ok = [asdict(r) for r in records if r.status == "ok"]
    keys = ("method", "sigma")
    summaries = []
    for metric in LUE_METRICS:
        usable = [r for r in ok if r[metric] is not None]
        if usable:
            summaries += summarize(usable, keys, metric)
    summary_path = out / "lue_summary.csv"
    write_summary_csv(summaries, summary_path, keys)
    _sidecar(cfg, out / "lue_sim.yaml", config_id=config_hash, runs=len(records))

    n_failed = sum(r.status != "ok" for r in records)
    for s in summaries:
        if s.metric in ("gpp_r2", "reco_r2", "nee_r2"):
            logger.info(
                "%s sigma=%s %s: median=%.4f (%.4f/%.4f)",
                s.key("method"), s.key("sigma"), s.metric, s.median, s.q25, s.q75,
            )
    plot_path = _plot("plot_lue_sweep", summaries, out / "lue_sweep.svg")
    logger.info("Wrote %s and %s (%d failed)", storage.path, summary_path, n_failed)
    return SweepResult(records, summary_path, storage.path, n_failed, plot_path)


def _plot(name: str, summaries, path: Path) -> Path | None:
    from src.chm import plotting

    return getattr(plotting, name)(summaries, path)


# ── DML on a user CSV ─────────────────────────────────────────────


@dataclass(frozen=True)
class CsvRunResult:
    summary: dict
    summary_path: Path
    predictions_path: Path
    test_predictions_path: Path | None = None


def _csv_header(path: Path) -> list[str]:
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")
    with open(path, newline="") as f:
        try:
            return [h.strip() for h in next(csv.reader(f))]
        except StopIteration:
            return []


def csv_roles(cfg: ExperimentConfig) -> RoleSpec:
    """Roles for a CSV run: the q10-data and lue-data presets, overridable per key."""
    if cfg.experiment == "q10-data":
        w = (*RB_PREDICTORS, "VPD") if cfg.include_vpd else RB_PREDICTORS
        return RoleSpec(
            y=cfg.y or "NEE",
            t=cfg.t or "TA",
            x=cfg.x,
            w=cfg.w or w,
            f=parse_transform(cfg.transform) if cfg.transform != "identity" else AffineScale(),
        )
    if cfg.experiment == "lue-data":
        return RoleSpec(
            y=cfg.y or "NEE",
            t=cfg.t or "SW_IN",
            x=cfg.x or ("TA", "VPD"),
            w=cfg.w or RB_PREDICTORS,
            f=parse_transform(cfg.transform)
            if cfg.transform != "identity"
            else lue_roles(cfg.lue_transform).f,
        )
    if not cfg.y or not cfg.t:
        raise ConfigError("CSV runs need 'y' and 't' unless experiment is q10-data or lue-data")
    return RoleSpec(y=cfg.y, t=cfg.t, x=cfg.x, w=cfg.w, f=parse_transform(cfg.transform))


def _composition(cfg: ExperimentConfig) -> str:
    """A configured composition wins; a logged outcome is additive; else the preset's."""
    if cfg.composition is not None:
        return cfg.composition
    if cfg.log_target:
        return "additive"
    return PRESET_COMPOSITIONS.get(cfg.experiment, "additive")


def _prepare_frame(
    cfg: ExperimentConfig, roles: RoleSpec, path: Path
) -> tuple[FluxFrame, dict]:
    """Load, derive helper columns and keep the rows the fit may use."""
    derived = {"f_SW", *RB_PREDICTORS} if cfg.experiment in ("q10-data", "lue-data") else set()
    if cfg.log_target:
        derived.add(f"log_{roles.y}")
    needed = [
        c
        for c in dict.fromkeys(
            (
                *roles.required_columns(),
                *cfg.extra_predictors,
                *cfg.measured_columns,
            )
        )
        if c not in derived
    ]
    if cfg.experiment in ("q10-data", "lue-data") or cfg.nighttime_only:
        needed.append("SW_POT")
    needed = list(dict.fromkeys(needed))
    header = _csv_header(path)
    missing = [c for c in needed if c not in header]
    if missing:
        raise RoleError(f"Role column(s) not in data: {', '.join(missing)}")

    frame = load_csv(path, needed, qc_max=cfg.qc_max)
    n_loaded = len(frame)
    if cfg.experiment in ("q10-data", "lue-data") and not frame.has_column("SW_POT_sm"):
        frame = derive_smoothed_radiation(frame)
    if cfg.nighttime_only or cfg.experiment == "q10-data":
        frame = select_nighttime(frame)
    if cfg.experiment == "lue-data" and roles.f == Precomputed("f_SW"):
        frame = filter_measured(frame, (roles.y, roles.t))
        fits = fit_windows(frame, roles.t, roles.y, LUE_WINDOW_DAYS, LUE_CENTER_DAYS)
        write_windows_csv(fits, Path(cfg.output_dir) / "light_response_windows.csv")
        f_sw = transform_sw(frame, LUE_WINDOW_DAYS, LUE_CENTER_DAYS, roles.t, roles.y, fits)
        frame = frame.with_columns({"f_SW": f_sw})
    if cfg.log_target or _composition(cfg) == "multiplicative-exp":
        frame = frame.select(frame.quality[roles.y] & (frame.column(roles.y) > 0))
    if cfg.log_target:
        frame = add_log_column(frame, roles.y)
    outcome = f"log_{roles.y}" if cfg.log_target else roles.y
    required = [outcome if c == roles.y else c for c in roles.required_columns()]
    frame = filter_measured(frame, (*required, *cfg.extra_predictors, *cfg.measured_columns))
    info = {"n_loaded": n_loaded, "n_used": len(frame)}
    info["measured_fraction"] = len(frame) / n_loaded if n_loaded else 0.0
    return frame, info


def _predictions(model: HybridModel, frame: FluxFrame, outcome: str) -> FluxFrame:
    y_hat = predict_hybrid(model, frame)
    y = frame.column(outcome)
    columns = {
        outcome: y,
        "y_hat": y_hat,
        "residual": y - y_hat,
        "g_hat": model.g_hat.predict(frame),
        "effect_term": effect_term(model, frame),
    }
    if not isinstance(model.effect, ConstantEffect):
        columns["theta_hat"] = theta_at(model.effect, frame.matrix(model.roles.x))
    return FluxFrame(timestamps=frame.timestamps, columns=columns)


def run_on_csv(
    cfg: ExperimentConfig, csv_path: str | Path | None = None, config_hash: str = ""
) -> CsvRunResult:
    """Fit a hybrid model to a CSV and write the fit summary plus per-row predictions.

    Raises:
        ConfigError: No CSV path, or roles incomplete.
        RoleError: A role column is absent from the CSV header.
        DatasetError, DmlError: Unusable data.
    """
    path = csv_path or cfg.csv_path
    if not path:
        raise ConfigError("No CSV given (set csv_path or pass --csv)")
    path = Path(path)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    roles = csv_roles(cfg)
    frame, info = _prepare_frame(cfg, roles, path)
    if cfg.log_target:
        roles = replace(roles, y=f"log_{roles.y}")
    composition = _composition(cfg)

    test = None
    if cfg.train_years or cfg.test_years:
        frame, test = split_by_year(frame, cfg.train_years, cfg.test_years)
    if len(frame) < 2 * cfg.k_folds:
        raise ConfigError(f"Only {len(frame)} usable rows for {cfg.k_folds}-fold cross-fitting")

    seed = cfg.seed
    heterogeneous = cfg.effect == "heterogeneous" or cfg.experiment == "lue-data"
    settings = DmlSettings(
        y_learner=learner_spec(cfg.y_learner, cfg, seed),
        t_learner=learner_spec(cfg.t_learner, cfg, seed),
        final_learner=learner_spec(cfg.final_learner, cfg, seed) if heterogeneous else None,
        g_learner=learner_spec(cfg.g_learner, cfg, derive_seed(seed, 1))
        if cfg.g_estimator == "refit"
        else None,
        extra_predictors=cfg.extra_predictors,
        composition=composition,
        k_folds=cfg.k_folds,
        fold_mode=cfg.fold_mode,
        seed=seed,
    )
    dml = fit_hybrid(frame, roles, settings)

    extra = {
        "experiment": cfg.experiment,
        "csv_path": str(path),
        "config_id": config_hash,
        "y": roles.y,
        "t": roles.t,
        "x": list(roles.x),
        "w": list(roles.w),
        "transform": type(roles.f).__name__,
        "g_estimator": cfg.g_estimator,
        **info,
    }
    predictions_path = out / "predictions.csv"
    write_csv(_predictions(dml.model, frame, roles.y), predictions_path)
    test_path = None
    if test is not None and len(test):
        test_pred = _predictions(dml.model, test, roles.y)
        test_path = out / "predictions_test.csv"
        write_csv(test_pred, test_path)
        s = score(test_pred.column("y_hat"), test.column(roles.y))
        extra.update(test_n=len(test), test_r2=s.r2, test_rmse=s.rmse, test_bias=s.bias)
    if not isinstance(dml.effect, ConstantEffect):
        save_model(dml.effect.model, out / "effect_model.json")
    if isinstance(dml.model.g_hat, Refit):
        save_model(dml.model.g_hat.model, out / "g_model.json")

    summary = dml.summary(extra)
    summary_path = out / "summary.json"
    write_summary(summary, summary_path)
    if isinstance(dml.effect, ConstantEffect):
        logger.info(
            "theta=%.4f (se %.4f, 95%% CI %.4f..%.4f), exp(theta)=%.4f on %d rows",
            dml.effect.theta, dml.effect.std_error, *dml.effect.ci_95, summary["exp_theta"],
            len(frame),
        )
    logger.info("Wrote %s and %s", summary_path, predictions_path)
    return CsvRunResult(summary, summary_path, predictions_path, test_path)
