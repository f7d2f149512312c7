"""Monte Carlo and exact Fock-space checks of the cumulant engine."""

import numpy as np
import pytest

from mqns.bath import DephasingModel, OhmicDensity, inverse_temperature_ps
from mqns.control import (
    ControlEvent,
    Sequence,
    cdd,
    compile_sequence,
    cpmg,
    overlay,
    pi_op,
    swap_cdd,
    swap_op,
    uneven_cdd1_single,
)
from mqns.dynamics import multiplier_matrix, window_coefficients
from mqns.oracle import (
    BosonMode,
    FewModeBath,
    fock_multipliers,
    fock_prediction,
    mc_multipliers,
    sample_phase_table,
)

TRANSIT = 10.0 / 7.0


def classical_model(n_qubits):
    tmat = np.zeros((n_qubits, n_qubits))
    if n_qubits == 2:
        tmat[0, 1], tmat[1, 0] = TRANSIT, -TRANSIT
    return DephasingModel(
        n_qubits=n_qubits,
        density=OhmicDensity(0.001, 1.5),
        beta=inverse_temperature_ps(5.0),
        transit_times=tmat,
        zero_minus="all",
    )


def predicted_multipliers(schedule, model):
    return multiplier_matrix(window_coefficients(schedule, model), schedule.n_qubits)


# ----------------------------------------------------------------------
# Monte Carlo


def test_mc_matches_engine_single_qubit():
    model = classical_model(1)
    sched = compile_sequence(cpmg(10, 1))
    want = predicted_multipliers(sched, model)
    got = mc_multipliers(sched, model, 20000, np.random.default_rng(42),
                         delta_omega=2 * np.pi / 240.0)
    err = np.abs(got.multipliers - want)
    assert np.all(err <= np.maximum(3.0 * got.stderr, 0.01))
    # the free window decays visibly, so the check is not vacuous
    assert want[0, 1].real < 0.99


def test_mc_matches_engine_two_qubit_cross():
    model = classical_model(2)
    seq = overlay(cpmg(10, qubit=1, n_qubits=2), cdd(1, 10, qubit=2, n_qubits=2))
    sched = compile_sequence(seq)
    want = predicted_multipliers(sched, model)
    got = mc_multipliers(sched, model, 20000, np.random.default_rng(7),
                         delta_omega=2 * np.pi / 240.0)
    err = np.abs(got.multipliers - want)
    assert np.all(err <= np.maximum(3.0 * got.stderr, 0.01))
    assert np.max(np.abs(got.multipliers - np.eye(4))) > 0.05


def test_mc_covers_swap_schedules():
    model = classical_model(2)
    sched = compile_sequence(swap_cdd(1, 8))
    want = predicted_multipliers(sched, model)
    got = mc_multipliers(sched, model, 20000, np.random.default_rng(11),
                         delta_omega=2 * np.pi / 200.0)
    err = np.abs(got.multipliers - want)
    assert np.all(err <= np.maximum(3.0 * got.stderr, 0.01))


def test_mc_phases_are_gaussian():
    model = classical_model(1)
    sched = compile_sequence(cpmg(10, 1))
    phases = sample_phase_table(sched, model, 20000, np.random.default_rng(5))
    x = phases[:, 0]
    kurt = np.mean(x**4) / np.mean(x**2) ** 2 - 3.0
    assert abs(kurt) < 0.15  # fourth cumulant consistent with zero at ~3 sigma


def test_mc_deterministic_given_seed():
    model = classical_model(1)
    sched = compile_sequence(cpmg(6, 1))
    a = mc_multipliers(sched, model, 3000, np.random.default_rng(3))
    b = mc_multipliers(sched, model, 3000, np.random.default_rng(3))
    assert np.array_equal(a.multipliers, b.multipliers)


def test_mc_rejects_asymmetric_spectra():
    model = classical_model(1).variant("none")
    sched = compile_sequence(cpmg(10, 1))
    with pytest.raises(ValueError, match="classical"):
        mc_multipliers(sched, model, 100, np.random.default_rng(0))


# ----------------------------------------------------------------------
# few-mode Fock oracle


def thermal_nbar(beta, omega):
    return 1.0 / np.expm1(beta * omega)


def test_fock_measure_detailed_balance():
    beta = 1.3
    mode = BosonMode(omega=1.1, nbar=thermal_nbar(beta, 1.1), couplings=(0.05,))
    measure = FewModeBath([mode], collective=False).measure()
    m_neg, m_pos = measure.pair_mass(1, 1)
    assert m_pos / m_neg == pytest.approx(np.exp(beta * 1.1), rel=1e-12)


def test_fock_matches_engine_single_qubit():
    bath = FewModeBath([BosonMode(1.3, 0.4, (0.04,))], collective=False)
    got = fock_multipliers(cpmg(10, 1), bath)
    want = fock_prediction(cpmg(10, 1), bath)
    assert np.max(np.abs(got - want)) < 1e-6
    assert abs(got[0, 1]) < 0.999  # visible decay


def test_fock_matches_engine_two_qubit_swaps():
    bath = FewModeBath(
        [
            BosonMode(1.1, 0.35, (0.03 + 0.015j, 0.02)),
            BosonMode(1.9, 0.2, (0.01, 0.025 - 0.01j)),
        ],
        collective=True,
    )
    seq = swap_cdd(1, 8)
    got = fock_multipliers(seq, bath)
    want = fock_prediction(seq, bath)
    assert np.max(np.abs(got - want)) < 1e-6
    # spectral asymmetry shows up as coherence phases; make sure they exist
    assert np.max(np.abs(np.angle(got[0, 1:]))) > 1e-4


def test_fock_randomized_event_lists():
    rng = np.random.default_rng(2024)
    cases = 0
    while cases < 4:
        slots = sorted(rng.choice(np.arange(1, 16), size=4, replace=False))
        events = []
        for k, s in enumerate(slots):
            if k % 2 == 0:
                events.append(ControlEvent(s, [pi_op(int(rng.integers(1, 3)))]))
            else:
                events.append(ControlEvent(s, [swap_op(1, 2), pi_op(1, 2)]))
        seq = Sequence(2, 16, events)
        if not compile_sequence(seq).is_net_identity:
            continue
        cases += 1
        bath = FewModeBath(
            [BosonMode(rng.uniform(0.8, 2.0), rng.uniform(0.2, 0.5),
                       tuple(rng.normal(0, 0.02, 2) + 1j * rng.normal(0, 0.02, 2)))],
            collective=bool(rng.integers(0, 2)),
        )
        got = fock_multipliers(seq, bath)
        want = fock_prediction(seq, bath)
        assert np.max(np.abs(got - want)) < 1e-6


def test_fock_collective_term_matters():
    mode = BosonMode(1.3, 0.4, (0.04, 0.03))
    seq = overlay(cpmg(10, qubit=1, n_qubits=2), cpmg(10, qubit=2, n_qubits=2))
    with_c = fock_multipliers(seq, FewModeBath([mode], collective=True))
    without = fock_multipliers(seq, FewModeBath([mode], collective=False))
    assert np.max(np.abs(with_c - without)) > 1e-4


def test_fock_requires_net_identity():
    bath = FewModeBath([BosonMode(1.3, 0.3, (0.02,))], collective=False)
    with pytest.raises(ValueError, match="net-identity"):
        fock_multipliers(uneven_cdd1_single(8, 1), bath)


def test_fock_guards():
    with pytest.raises(ValueError):
        BosonMode(-1.0, 0.2, (0.01,))
    with pytest.raises(ValueError):
        FewModeBath([BosonMode(1.0, 0.2, (0.01,)), BosonMode(1.0, 0.3, (0.02,))])
    with pytest.raises(ValueError):
        FewModeBath([BosonMode(1.0, 0.2, (0.01,)), BosonMode(2.0, 0.3, (0.02, 0.01))])
