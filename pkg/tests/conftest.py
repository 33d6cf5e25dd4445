"""Shared pytest fixtures for the chm test suite."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from src.chm.dataset import FluxFrame, half_hourly_stamps
from src.chm.drivers import DriverConfig, generate_drivers
from src.chm.synthgen import Q10GenConfig, q10_from_drivers


@pytest.fixture(scope="session")
def drivers() -> FluxFrame:
    """One synthetic driver year (17520 half-hours), seed 0."""
    return generate_drivers(DriverConfig(seed=0))


@pytest.fixture(scope="session")
def q10_frame(drivers: FluxFrame) -> FluxFrame:
    """Noisy synthetic respiration with Q10 = 1.5 on the fixture drivers."""
    return q10_from_drivers(drivers, Q10GenConfig(q10=1.5, seed=1))


@pytest.fixture
def out_dir(tmp_path: Path) -> Path:
    """Fresh output directory under tmp_path."""
    p = tmp_path / "results"
    p.mkdir()
    return p


def _linear_frame(n: int = 200, theta: float = 2.0, seed: int = 0) -> FluxFrame:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    w = rng.normal(size=n)
    t = 0.5 * x + rng.normal(size=n)
    y = theta * t + x + w + rng.normal(size=n)
    return FluxFrame(
        timestamps=half_hourly_stamps("2020-01-01T00:00", n),
        columns={"Y": y, "T": t, "X": x, "W": w},
    )


@pytest.fixture
def linear_frame():
    """Factory for Y = θ·T + X + W + ε with T = 0.5·X + ν (partially linear DGP)."""
    return _linear_frame
