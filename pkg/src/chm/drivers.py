"""Synthetic half-hourly meteorological drivers (TA, SW_IN, SW_POT, VPD).

Stands in for a flux-tower site-year so every experiment runs without
downloads. Distinct seeds give distinct site-years with the same climate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from src.chm.dataset import DatasetError, FluxFrame, stamps_to_datetime64, datetime64_to_stamps

logger = logging.getLogger(__name__)

SOLAR_CONSTANT = 1367.0  # W/m²


@dataclass(frozen=True)
class DriverConfig:
    latitude_deg: float = 47.1
    start_year: int = 2003
    years: int = 1
    mean_ta_c: float = 7.0
    seasonal_amplitude_c: float = 10.0
    diurnal_amplitude_c: float = 4.0
    ta_noise_sd_c: float = 2.5
    ta_noise_ar: float = 0.995
    cloud_mean: float = 0.6
    cloud_sd: float = 0.2
    cloud_ar: float = 0.6
    rh_mean: float = 0.72
    rh_diurnal_amplitude: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        if not -90.0 <= self.latitude_deg <= 90.0:
            raise DatasetError(f"latitude_deg must be in [-90, 90], got {self.latitude_deg}")
        if self.years < 1:
            raise DatasetError(f"years must be >= 1, got {self.years}")
        if not 0.0 <= self.ta_noise_ar < 1.0 or not 0.0 <= self.cloud_ar < 1.0:
            raise DatasetError("AR(1) coefficients must be in [0, 1)")


def potential_radiation(stamps: np.ndarray, latitude_deg: float) -> np.ndarray:
    """Top-of-atmosphere shortwave on a horizontal plane, W/m².

    Evaluated at the middle of each half-hour; timestamps are taken as
    local solar time.
    """
    instants = stamps_to_datetime64(stamps) + np.timedelta64(15, "m")
    day = instants.astype("datetime64[D]")
    doy = (day - day.astype("datetime64[Y]")).astype(np.int64) + 1
    hour = (instants - day).astype(np.int64) / 60.0

    lat = np.deg2rad(latitude_deg)
    declination = np.deg2rad(23.45) * np.sin(2.0 * np.pi * (284 + doy) / 365.0)
    hour_angle = np.deg2rad(15.0 * (hour - 12.0))
    cos_zenith = np.sin(lat) * np.sin(declination) + np.cos(lat) * np.cos(declination) * np.cos(
        hour_angle
    )
    eccentricity = 1.0 + 0.033 * np.cos(2.0 * np.pi * doy / 365.0)
    return SOLAR_CONSTANT * eccentricity * np.maximum(cos_zenith, 0.0)


def saturation_vapour_pressure(ta_c: np.ndarray) -> np.ndarray:
    """Magnus formula, hPa."""
    return 6.1078 * np.exp(17.27 * ta_c / (ta_c + 237.3))


def _ar1(rng: np.random.Generator, n: int, phi: float, sd: float) -> np.ndarray:
    """Stationary AR(1) series with marginal standard deviation ``sd``."""
    shocks = rng.standard_normal(n) * sd * np.sqrt(1.0 - phi**2)
    out = np.empty(n)
    state = rng.standard_normal() * sd
    for i in range(n):
        state = phi * state + shocks[i]
        out[i] = state
    return out


def generate_drivers(config: DriverConfig = DriverConfig()) -> FluxFrame:
    """Generate ``config.years`` calendar years of half-hourly drivers."""
    first = np.datetime64(f"{config.start_year}-01-01T00:00", "m")
    end = np.datetime64(f"{config.start_year + config.years}-01-01T00:00", "m")
    n = int((end - first) // np.timedelta64(30, "m"))
    instants = first + np.arange(n) * np.timedelta64(30, "m")
    stamps = datetime64_to_stamps(instants)

    cloud_rng, ta_rng, rh_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3)
    )

    sw_pot = potential_radiation(stamps, config.latitude_deg)

    day = instants.astype("datetime64[D]")
    day_number = (day - day[0]).astype(np.int64)
    n_days = int(day_number[-1]) + 1
    doy = (day - day.astype("datetime64[Y]")).astype(np.int64) + 1
    hour = (instants - day).astype(np.int64) / 60.0

    transmissivity = np.clip(
        config.cloud_mean + _ar1(cloud_rng, n_days, config.cloud_ar, config.cloud_sd), 0.1, 0.95
    )[day_number]
    sw_in = sw_pot * transmissivity

    seasonal = config.mean_ta_c - config.seasonal_amplitude_c * np.cos(
        2.0 * np.pi * (doy - 15) / 365.0
    )
    # clear days have a wider diurnal range
    diurnal = (
        config.diurnal_amplitude_c
        * (0.5 + transmissivity)
        * np.cos(2.0 * np.pi * (hour - 15.0) / 24.0)
    )
    ta = seasonal + diurnal + _ar1(ta_rng, n, config.ta_noise_ar, config.ta_noise_sd_c)

    rh = (
        config.rh_mean
        + config.rh_diurnal_amplitude * np.cos(2.0 * np.pi * (hour - 4.0) / 24.0)
        - 0.3 * (transmissivity - config.cloud_mean)
        + _ar1(rh_rng, n, 0.95, 0.05)
    )
    rh = np.clip(rh, 0.05, 1.0)
    vpd = saturation_vapour_pressure(ta) * (1.0 - rh)

    logger.debug("Generated %d driver rows (seed=%d, years=%d)", n, config.seed, config.years)
    return FluxFrame(
        timestamps=stamps,
        columns={"TA": ta, "SW_IN": sw_in, "SW_POT": sw_pot, "VPD": vpd},
    )
