"""Tests for chm.synthgen module."""

import numpy as np
import pytest
import yaml

from src.chm.synthgen import (
    CARBON_MOLAR_MASS,
    LueGenConfig,
    Q10GenConfig,
    SynthError,
    base_respiration,
    gen_lue,
    gen_q10,
    light_use_efficiency,
    lue_from_drivers,
    q10_from_drivers,
    truncated_normal,
    write_sidecar,
)


class TestTruncatedNormal:
    def test_support_and_moments(self):
        draws = truncated_normal(20000, 0.2, -0.95, 0.95, seed=0)
        assert draws.shape == (20000,)
        assert draws.min() >= -0.95 and draws.max() <= 0.95
        assert abs(draws.mean()) < 0.01
        assert draws.std() == pytest.approx(0.2, rel=0.03)

    def test_tight_bounds_respected(self):
        draws = truncated_normal(500, 1.0, -0.1, 0.1, seed=1)
        assert np.all(np.abs(draws) <= 0.1)

    def test_seeded(self):
        np.testing.assert_array_equal(
            truncated_normal(50, 0.2, -0.5, 0.5, 3), truncated_normal(50, 0.2, -0.5, 0.5, 3)
        )

    def test_bad_bounds(self):
        with pytest.raises(SynthError, match="lo < hi"):
            truncated_normal(10, 0.2, 0.5, -0.5, 0)


class TestBaseRespiration:
    def test_minimum_is_fixed_offset(self, drivers):
        rb = base_respiration(drivers.column("SW_POT"))["R_b_syn"]
        assert rb.min() == pytest.approx(0.075 * np.pi, abs=1e-12)
        assert np.all(rb > 0)

    def test_smoothed_columns_present(self, drivers):
        parts = base_respiration(drivers.column("SW_POT"))
        assert set(parts) == {"SW_POT_sm", "SW_POT_sm_diff", "R_b_syn"}
        assert np.all(np.isfinite(parts["SW_POT_sm_diff"]))


class TestGenQ10:
    def test_noise_free_follows_q10_law(self, drivers):
        frame = q10_from_drivers(drivers, Q10GenConfig(q10=2.0, noise=False))
        ta = frame.column("TA")
        expected = frame.column("R_b_syn") * 2.0 ** ((ta - 15.0) / 10.0)
        np.testing.assert_allclose(frame.column("R_eco_syn"), expected, rtol=1e-12)

    def test_noise_is_bounded_relative_error(self, q10_frame):
        ta = q10_frame.column("TA")
        clean = q10_frame.column("R_b_syn") * 1.5 ** ((ta - 15.0) / 10.0)
        rel = q10_frame.column("R_eco_syn") / clean - 1.0
        assert np.all(np.abs(rel) <= 0.95 + 1e-12)
        assert np.all(q10_frame.column("R_eco_syn") > 0)
        assert rel.std() == pytest.approx(0.2, rel=0.05)

    def test_keeps_driver_timestamps(self, drivers, q10_frame):
        np.testing.assert_array_equal(q10_frame.timestamps, drivers.timestamps)

    def test_default_timestamps(self):
        frame = gen_q10(np.full(96, 10.0), np.zeros(96), Q10GenConfig(noise=False))
        assert frame.timestamps[0] == 200301010000
        assert frame.timestamps[-1] == 200301022330

    def test_length_mismatch(self):
        with pytest.raises(SynthError, match="expected 10"):
            gen_q10(np.zeros(10), np.zeros(9))

    def test_missing_values(self):
        ta = np.zeros(10)
        ta[3] = np.nan
        with pytest.raises(SynthError, match="missing"):
            gen_q10(ta, np.zeros(10))

    @pytest.mark.parametrize(
        "overrides",
        [
            {"q10": 0.0},
            {"noise_sd": 0.0},
            {"noise_bounds": (-0.5, 0.9)},
            {"noise_bounds": (-1.0, 1.0)},
        ],
    )
    def test_invalid_config(self, overrides):
        with pytest.raises(SynthError):
            Q10GenConfig(**overrides)


class TestGenLue:
    def test_lue_optimum(self):
        assert light_use_efficiency(np.array([20.0]), np.array([10.0]))[0] == pytest.approx(0.5)

    def test_vpd_stress_only_above_threshold(self):
        lue = light_use_efficiency(np.full(3, 20.0), np.array([0.0, 10.0, 20.0]))
        assert lue[0] == lue[1] == pytest.approx(0.5)
        assert lue[2] == pytest.approx(0.5 * np.exp(-1.0))

    def test_flux_identities(self, drivers):
        frame = lue_from_drivers(drivers, LueGenConfig(sigma=0.0))
        gpp = frame.column("GPP_syn")
        np.testing.assert_allclose(
            gpp, frame.column("LUE_syn") * frame.column("SW_IN") / CARBON_MOLAR_MASS
        )
        np.testing.assert_allclose(
            frame.column("NEE_syn_clean"), -gpp + frame.column("RECO_syn")
        )
        np.testing.assert_array_equal(frame.column("NEE_syn"), frame.column("NEE_syn_clean"))
        assert np.all(gpp[frame.column("SW_IN") == 0] == 0)

    def test_gpp_in_micromoles(self):
        frame = gen_lue(
            ta=np.full(2, 20.0),
            vpd=np.full(2, 5.0),
            sw_in=np.array([0.0, 600.0]),
            sw_pot=np.array([0.0, 800.0]),
        )
        assert frame.column("GPP_syn")[1] == pytest.approx(0.5 * 600.0 / 12.011)

    def test_sw_conversion_scales_gpp_only(self, drivers):
        native = lue_from_drivers(drivers, LueGenConfig(sigma=0.0))
        raw = lue_from_drivers(drivers, LueGenConfig(sigma=0.0, sw_conversion=1.0))
        np.testing.assert_allclose(
            raw.column("GPP_syn"), native.column("GPP_syn") * CARBON_MOLAR_MASS
        )
        np.testing.assert_array_equal(raw.column("RECO_syn"), native.column("RECO_syn"))

    def test_noise_is_multiplicative(self, drivers):
        frame = lue_from_drivers(drivers, LueGenConfig(sigma=0.4, seed=5))
        clean = frame.column("NEE_syn_clean")
        eps = (frame.column("NEE_syn") / clean - 1.0) / 0.4
        ok = np.abs(clean) > 1e-6
        assert eps[ok].std() == pytest.approx(1.0, rel=0.05)

    def test_noise_seeded(self, drivers):
        a = lue_from_drivers(drivers, LueGenConfig(sigma=0.1, seed=2))
        b = lue_from_drivers(drivers, LueGenConfig(sigma=0.1, seed=2))
        np.testing.assert_array_equal(a.column("NEE_syn"), b.column("NEE_syn"))

    def test_negative_sigma(self):
        with pytest.raises(SynthError, match="sigma"):
            LueGenConfig(sigma=-0.1)

    def test_length_mismatch(self):
        with pytest.raises(SynthError, match="sw_in"):
            gen_lue(np.zeros(10), np.zeros(10), np.zeros(8), np.zeros(10))


def test_write_sidecar(tmp_path):
    path = tmp_path / "meta" / "q10.yaml"
    write_sidecar(path, Q10GenConfig(q10=2.5, seed=9), driver_seed=4)
    doc = yaml.safe_load(path.read_text())
    assert doc["generator"] == "Q10GenConfig"
    assert doc["q10"] == 2.5
    assert doc["seed"] == 9
    assert doc["noise_bounds"] == [-0.95, 0.95]
    assert doc["driver_seed"] == 4
