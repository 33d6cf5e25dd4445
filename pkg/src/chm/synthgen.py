"""Seeded synthetic respiration (Q10) and flux-partitioning (LUE) datasets."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import yaml

from src.chm.dataset import (
    DatasetError,
    FluxFrame,
    SAMPLES_PER_DAY,
    central_difference,
    half_hourly_stamps,
    moving_average_smooth,
)

logger = logging.getLogger(__name__)

DEFAULT_START = "2003-01-01T00:00"
# gC MJ⁻¹ · W m⁻² to µmol CO2 m⁻² s⁻¹: 1 W = 1e-6 MJ s⁻¹, 1 gC = 1e6/12.011 µmol
CARBON_MOLAR_MASS = 12.011


class SynthError(Exception):
    """Raised when a generator is misconfigured or given unusable drivers."""


@dataclass(frozen=True)
class Q10GenConfig:
    q10: float = 1.5
    t_ref: float = 15.0
    noise_sd: float = 0.2
    noise_bounds: tuple[float, float] = (-0.95, 0.95)
    noise: bool = True
    smoothing_days: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.noise_bounds
        if not self.q10 > 0:
            raise SynthError(f"q10 must be > 0, got {self.q10}")
        if not self.noise_sd > 0:
            raise SynthError(f"noise_sd must be > 0, got {self.noise_sd}")
        if not lo < hi or lo != -hi or lo <= -1.0:
            raise SynthError(
                f"noise_bounds must be symmetric with lower bound > -1, got {self.noise_bounds}"
            )


@dataclass(frozen=True)
class LueGenConfig:
    sigma: float = 0.0
    q10: float = 1.5
    smoothing_days: float = 10.0
    seed: int = 0
    sw_conversion: float = 1.0 / CARBON_MOLAR_MASS

    def __post_init__(self) -> None:
        if not self.sigma >= 0:
            raise SynthError(f"sigma must be >= 0, got {self.sigma}")
        if not self.q10 > 0:
            raise SynthError(f"q10 must be > 0, got {self.q10}")
        if not self.sw_conversion > 0:
            raise SynthError(f"sw_conversion must be > 0, got {self.sw_conversion}")


def truncated_normal(
    n: int, sd: float, lo: float, hi: float, seed: int | np.random.Generator
) -> np.ndarray:
    """Normal(0, sd²) conditioned on [lo, hi], by rejection sampling."""
    if not lo < hi:
        raise SynthError(f"Need lo < hi, got [{lo}, {hi}]")
    if not sd > 0:
        raise SynthError(f"sd must be > 0, got {sd}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = np.empty(n)
    filled = 0
    while filled < n:
        draw = rng.normal(0.0, sd, size=max(2 * (n - filled), 64))
        draw = draw[(draw >= lo) & (draw <= hi)][: n - filled]
        out[filled : filled + draw.size] = draw
        filled += draw.size
    return out


def _as_series(name: str, values, n: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise SynthError(f"'{name}' must be a non-empty 1-D series")
    if n is not None and arr.size != n:
        raise SynthError(f"'{name}' has length {arr.size}, expected {n}")
    if not np.all(np.isfinite(arr)):
        raise SynthError(f"'{name}' contains missing values")
    return arr


def _timestamps(timestamps, n: int) -> np.ndarray:
    if timestamps is None:
        return half_hourly_stamps(DEFAULT_START, n)
    ts = np.asarray(timestamps, dtype=np.int64)
    if ts.shape != (n,):
        raise SynthError(f"timestamps has length {ts.size}, expected {n}")
    return ts


def base_respiration(sw_pot: np.ndarray, smoothing_days: float = 10.0) -> dict[str, np.ndarray]:
    """SW_POT_sm, SW_POT_sm_diff and the synthetic base respiration R_b."""
    try:
        smooth = moving_average_smooth(sw_pot, smoothing_days, SAMPLES_PER_DAY)
        diff = central_difference(smooth)
    except DatasetError as e:
        raise SynthError(str(e)) from e
    raw = 0.01 * smooth - 0.005 * diff
    rb = 0.75 * (raw - raw.min() + 0.1 * np.pi)
    return {"SW_POT_sm": smooth, "SW_POT_sm_diff": diff, "R_b_syn": rb}


def gen_q10(
    ta, sw_pot, cfg: Q10GenConfig = Q10GenConfig(), timestamps=None
) -> FluxFrame:
    """R_eco = R_b·q10^((TA − t_ref)/10)·(1 + ε), ε truncated normal."""
    ta = _as_series("ta", ta)
    sw_pot = _as_series("sw_pot", sw_pot, ta.size)
    parts = base_respiration(sw_pot, cfg.smoothing_days)
    reco = parts["R_b_syn"] * cfg.q10 ** ((ta - cfg.t_ref) / 10.0)
    if cfg.noise:
        lo, hi = cfg.noise_bounds
        reco = reco * (1.0 + truncated_normal(ta.size, cfg.noise_sd, lo, hi, cfg.seed))
    return FluxFrame(
        timestamps=_timestamps(timestamps, ta.size),
        columns={"TA": ta, "SW_POT": sw_pot, **parts, "R_eco_syn": reco},
    )


def light_use_efficiency(ta: np.ndarray, vpd: np.ndarray) -> np.ndarray:
    """0.5 · bell curve in TA around 20 °C · VPD stress above 10 hPa."""
    temperature = np.exp(-((0.1 * (ta - 20.0)) ** 2))
    with np.errstate(over="ignore"):
        vpd_factor = np.minimum(1.0, np.exp(-0.1 * (vpd - 10.0)))
    return 0.5 * temperature * vpd_factor


def gen_lue(
    ta, vpd, sw_in, sw_pot, cfg: LueGenConfig = LueGenConfig(), timestamps=None
) -> FluxFrame:
    """GPP = LUE·SW_IN·c; NEE = (−GPP + RECO)·(1 + σ·ε), ε standard normal.

    LUE is in gC MJ⁻¹ and SW_IN in W m⁻²; c = ``cfg.sw_conversion`` puts GPP
    in µmol CO2 m⁻² s⁻¹ alongside RECO. RECO is the noise-free Q10
    respiration, so the clean fluxes are exact ground truth.
    """
    ta = _as_series("ta", ta)
    n = ta.size
    vpd = _as_series("vpd", vpd, n)
    sw_in = _as_series("sw_in", sw_in, n)
    sw_pot = _as_series("sw_pot", sw_pot, n)

    parts = base_respiration(sw_pot, cfg.smoothing_days)
    reco = parts["R_b_syn"] * cfg.q10 ** ((ta - 15.0) / 10.0)
    lue = light_use_efficiency(ta, vpd)
    gpp = lue * sw_in * cfg.sw_conversion
    nee_clean = -gpp + reco
    if cfg.sigma > 0:
        eps = np.random.default_rng(cfg.seed).standard_normal(n)
        nee = nee_clean * (1.0 + cfg.sigma * eps)
    else:
        nee = nee_clean.copy()
    return FluxFrame(
        timestamps=_timestamps(timestamps, n),
        columns={
            "TA": ta,
            "VPD": vpd,
            "SW_IN": sw_in,
            "SW_POT": sw_pot,
            "SW_POT_sm": parts["SW_POT_sm"],
            "SW_POT_sm_diff": parts["SW_POT_sm_diff"],
            "GPP_syn": gpp,
            "RECO_syn": reco,
            "LUE_syn": lue,
            "NEE_syn": nee,
            "NEE_syn_clean": nee_clean,
        },
    )


def q10_from_drivers(drivers: FluxFrame, cfg: Q10GenConfig = Q10GenConfig()) -> FluxFrame:
    return gen_q10(drivers.column("TA"), drivers.column("SW_POT"), cfg, drivers.timestamps)


def lue_from_drivers(drivers: FluxFrame, cfg: LueGenConfig = LueGenConfig()) -> FluxFrame:
    return gen_lue(
        drivers.column("TA"),
        drivers.column("VPD"),
        drivers.column("SW_IN"),
        drivers.column("SW_POT"),
        cfg,
        drivers.timestamps,
    )


def write_sidecar(path: str | Path, cfg: Q10GenConfig | LueGenConfig, **extra) -> None:
    """YAML provenance record for a generated dataset."""
    doc = {"generator": type(cfg).__name__, **asdict(cfg), **extra}
    if "noise_bounds" in doc:
        doc["noise_bounds"] = list(doc["noise_bounds"])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=True)
