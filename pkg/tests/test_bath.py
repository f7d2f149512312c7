"""Spectral-model unit tests: frozen thermal values and exact symmetries."""

import numpy as np
import pytest

from mqns.bath import (
    DephasingModel,
    HBAR_OVER_KB_K_PS,
    OhmicDensity,
    check_symmetries,
    coth,
    inverse_temperature_ps,
    split_spectrum,
    thermal_spectrum,
)

XI, OMEGA_C, TEMP_K = 0.001, 1.5, 5.0
BETA = HBAR_OVER_KB_K_PS / TEMP_K


def exciton_model(**kw):
    cfg = {
        "model_class": "m2",
        "N": 2,
        "xi": XI,
        "omega_c_rad_per_ps": OMEGA_C,
        "temperature_K": TEMP_K,
        "positions_nm": [0.0, 10.0],
        "velocity_nm_per_ps": 7.0,
    }
    cfg.update(kw)
    return DephasingModel.from_config(cfg)


def test_constants_and_beta():
    assert HBAR_OVER_KB_K_PS == pytest.approx(7.638232577, abs=1e-9)
    assert inverse_temperature_ps(5.0) == pytest.approx(1.5276465154, abs=1e-9)


def test_coth_stable_small_and_large():
    x = np.array([1e-12, 1e-6, 0.1, 5.0, 400.0])
    ref = 1.0 / x + x / 3.0 - x**3 / 45.0  # Laurent series, valid for small x
    assert coth(x[0]) == pytest.approx(ref[0], rel=1e-12)
    assert coth(x[1]) == pytest.approx(ref[1], rel=1e-12)
    assert coth(np.array([5.0]))[0] == pytest.approx(1.0 / np.tanh(5.0), rel=1e-14)
    assert coth(np.array([400.0]))[0] == 1.0
    assert coth(np.array([-400.0]))[0] == -1.0


def test_ohmic_density_frozen_value():
    dens = OhmicDensity(xi=XI, omega_c=OMEGA_C)
    assert dens(1.0) == pytest.approx(6.411803884299546e-4, abs=1e-18)
    assert dens(-1.0) == dens(1.0)
    assert dens.slope_at_zero == XI


def test_thermal_spectrum_frozen_values():
    dens = OhmicDensity(xi=XI, omega_c=OMEGA_C)
    # zero-frequency limit 2*pi*xi/beta
    assert thermal_spectrum(dens, BETA, 0.0) == pytest.approx(0.004112983758899481, rel=1e-12)
    assert thermal_spectrum(dens, BETA, 1.0) == pytest.approx(0.005145455010951173, rel=1e-12)
    assert thermal_spectrum(dens, BETA, -1.0) == pytest.approx(0.001116799815116382, rel=1e-12)
    # continuity at 0
    assert thermal_spectrum(dens, BETA, 1e-9) == pytest.approx(
        thermal_spectrum(dens, BETA, 0.0), rel=1e-6
    )


def test_detailed_balance():
    dens = OhmicDensity(xi=XI, omega_c=OMEGA_C)
    w = np.linspace(0.05, 6.0, 40)
    ratio = thermal_spectrum(dens, BETA, w) / thermal_spectrum(dens, BETA, -w)
    assert np.allclose(ratio, np.exp(BETA * w), rtol=1e-12)


def test_transit_times_from_positions():
    model = exciton_model()
    assert model.transit_times[0, 1] == pytest.approx(10.0 / 7.0)
    assert model.transit_times[1, 0] == pytest.approx(-10.0 / 7.0)
    assert model.collective


def test_cross_spectrum_phase_and_composites():
    model = exciton_model()
    w = np.linspace(-4.0, 4.0, 101)
    s11 = model.cross_spectrum(1, 1, w)
    s12 = model.cross_spectrum(1, 2, w)
    assert np.allclose(s12, s11 * np.exp(-1j * w * (10.0 / 7.0)), rtol=1e-12)
    # collective mask 0 expands into the sum over single-qubit masks
    s10 = model.cross_spectrum(1, 0, w)
    assert np.allclose(s10, s11 + s12, rtol=1e-12)
    s00 = model.cross_spectrum(0, 0, w)
    s21 = model.cross_spectrum(2, 1, w)
    s22 = model.cross_spectrum(2, 2, w)
    assert np.allclose(s00, s11 + s12 + s21 + s22, rtol=1e-12)


def test_m1_has_no_collective_operator():
    model = exciton_model(model_class="m1")
    w = np.linspace(-3, 3, 7)
    assert not model.collective
    assert np.all(model.cross_spectrum(1, 0, w) == 0)
    assert np.all(model.cross_spectrum(0, 0, w) == 0)
    assert 0 not in model.bath_masks
    assert model.has_pair(1, 2) and not model.has_pair(0, 1)


def test_split_parts_and_symmetries():
    model = exciton_model()
    w = np.linspace(0.05, 5.0, 23)
    plus, minus = split_spectrum(model, 1, 1, w)
    dens = OhmicDensity(xi=XI, omega_c=OMEGA_C)
    assert np.allclose(plus, 2 * np.pi * dens(w) * coth(BETA * w / 2.0), rtol=1e-12)
    assert np.allclose(minus, 2 * np.pi * dens(w), rtol=1e-12)
    grid = np.concatenate([-w[::-1], [0.0], w])
    residuals = check_symmetries(model, grid)
    for name, val in residuals.items():
        assert val < 1e-10, (name, val)


def test_zero_minus_variants():
    model = exciton_model()
    w = np.linspace(-3.0, 3.0, 61)
    selfless = model.variant("self")
    _, minus_self = split_spectrum(selfless, 1, 1, w)
    assert np.max(np.abs(minus_self)) < 1e-15
    _, minus_cross = split_spectrum(selfless, 1, 2, w)
    assert np.max(np.abs(minus_cross)) > 1e-4  # cross asymmetry survives
    plus_full, _ = split_spectrum(model, 1, 1, w)
    plus_self, _ = split_spectrum(selfless, 1, 1, w)
    assert np.allclose(plus_full, plus_self, rtol=1e-12)
    allless = model.variant("all")
    for a, b in [(1, 1), (1, 2), (2, 2), (1, 0), (0, 0)]:
        _, minus = split_spectrum(allless, a, b, w)
        assert np.max(np.abs(minus)) < 1e-14, (a, b)


def test_classical_components():
    bump = lambda w: 0.01 * np.exp(-((np.asarray(w) - 0.0) ** 2))
    model = exciton_model()
    model.classical[(3, 3)] = bump
    w = np.linspace(-2, 2, 11)
    assert np.allclose(model.cross_spectrum(3, 3, w), bump(w))
    assert 3 in model.bath_masks
    assert model.has_pair(3, 3)
    # pair-mask against single-qubit mask: no quantum part, no classical entry
    assert np.all(model.cross_spectrum(3, 1, w) == 0)
    # Hermitian partner fills in automatically
    cross = lambda w: (0.003 + 0.001j) * np.exp(-np.asarray(w) ** 2)
    model.classical[(1, 3)] = cross
    assert np.allclose(model.cross_spectrum(3, 1, w), np.conj(cross(w)))


def test_config_validation():
    with pytest.raises(ValueError):
        exciton_model(model_class="m3")
    with pytest.raises(ValueError):
        DephasingModel(
            n_qubits=2,
            density=OhmicDensity(XI, OMEGA_C),
            beta=BETA,
            transit_times=np.array([[0.0, 1.0], [1.0, 0.0]]),  # not antisymmetric
        )
