"""Tests for chm.drivers module."""

import numpy as np
import pytest

from src.chm.dataset import DatasetError
from src.chm.drivers import (
    DriverConfig,
    generate_drivers,
    potential_radiation,
    saturation_vapour_pressure,
)


class TestPotentialRadiation:
    def test_zero_at_midnight(self):
        assert potential_radiation(np.array([200306210000]), 47.1)[0] == 0.0

    def test_summer_noon_exceeds_winter_noon(self):
        summer, winter = potential_radiation(np.array([200306211145, 200312211145]), 47.1)
        assert summer > 2 * winter > 0

    def test_never_above_solar_constant_with_eccentricity(self):
        stamps = np.array([200301011200, 200307011200])
        assert np.all(potential_radiation(stamps, 0.0) <= 1367.0 * 1.033)


class TestSaturationVapourPressure:
    def test_freezing_point(self):
        assert saturation_vapour_pressure(np.array([0.0]))[0] == pytest.approx(6.1078)

    def test_increasing(self):
        assert np.all(np.diff(saturation_vapour_pressure(np.linspace(-20, 40, 50))) > 0)


class TestGenerateDrivers:
    def test_one_year_of_half_hours(self, drivers):
        assert len(drivers) == 365 * 48
        assert drivers.timestamps[0] == 200301010000
        assert drivers.timestamps[-1] == 200312312330

    def test_leap_year_length(self):
        assert len(generate_drivers(DriverConfig(start_year=2004))) == 366 * 48

    def test_columns_and_ranges(self, drivers):
        assert set(drivers.column_names) == {"TA", "SW_IN", "SW_POT", "VPD"}
        sw_in, sw_pot = drivers.column("SW_IN"), drivers.column("SW_POT")
        assert np.all(sw_in >= 0)
        assert np.all(sw_in <= sw_pot + 1e-9)
        assert np.all(drivers.column("VPD") >= 0)
        assert np.count_nonzero(sw_pot == 0) > len(drivers) // 3

    def test_seasonal_temperature_cycle(self, drivers):
        months = drivers.timestamps // 10**6 % 100
        ta = drivers.column("TA")
        assert ta[months == 7].mean() > ta[months == 1].mean() + 10

    def test_deterministic(self, drivers):
        again = generate_drivers(DriverConfig(seed=0))
        np.testing.assert_array_equal(again.column("TA"), drivers.column("TA"))
        np.testing.assert_array_equal(again.column("VPD"), drivers.column("VPD"))

    def test_seeds_give_distinct_site_years(self, drivers):
        other = generate_drivers(DriverConfig(seed=1))
        np.testing.assert_array_equal(other.column("SW_POT"), drivers.column("SW_POT"))
        assert not np.array_equal(other.column("TA"), drivers.column("TA"))

    @pytest.mark.parametrize(
        "overrides", [{"latitude_deg": 95.0}, {"years": 0}, {"ta_noise_ar": 1.0}]
    )
    def test_invalid_config(self, overrides):
        with pytest.raises(DatasetError):
            DriverConfig(**overrides)
