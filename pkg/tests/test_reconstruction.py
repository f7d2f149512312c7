"""Comb-row design, staged linear inversion, and the spectra estimators."""

import numpy as np
import pytest
from conftest import exciton_model

from mqns.bath import coth, inverse_temperature_ps, split_spectrum, thermal_spectrum
from mqns.control import as_fraction
from mqns.dynamics import window_coefficients
from mqns.reconstruction import (
    C_CROSS,
    C_DIAG_1,
    C_DIAG_BOTH,
    D_MINUS,
    D_PLUS,
    HarmonicGrid,
    IllConditionedError,
    PlanEntry,
    PlanError,
    RankDeficientError,
    ReconstructedBath,
    SpectrumEstimates,
    SpectrumTable,
    background_corrections,
    build_plan,
    comb_row,
    component_interpolant,
    delta_minus_cycle,
    delta_plus_cycle,
    estimate_spectral_density,
    estimate_temperature,
    measure_plan,
    net_brackets,
    pair_cycle,
    pair_interpolant,
    protocol_diagonal_step1,
    protocol_diagonal_step2,
    protocol_nondiagonal_self,
    realize_system,
    solve_system,
    validate_plan,
)

BASE = as_fraction(60.0)


@pytest.fixture(scope="module")
def setup():
    model = exciton_model()
    grid = HarmonicGrid(60.0, 32)
    table = SpectrumTable(model, grid)
    return model, grid, table


def engine_value(schedule, model, repetitions, combo):
    """Full quadrature evaluation of a combo: the independent row oracle."""
    coeffs = window_coefficients(schedule, model, repetitions=repetitions, omega_max=9.0)
    return sum(lam * coeffs[s][c] for lam, s, c in combo.terms)


# ----------------------------------------------------------------------
# harmonic grid and unknown table


def test_grid_harmonics_and_cycle_lookup(setup):
    model, grid, table = setup
    assert grid.omega0 == pytest.approx(2.0 * np.pi / 60.0, rel=1e-15)
    assert grid.omega(5) == pytest.approx(5 * grid.omega0, rel=1e-15)
    assert grid.cycle_harmonic(pair_cycle("cpmg", "cpmg", BASE / 5)) == 5
    with pytest.raises(PlanError):
        grid.cycle_harmonic(pair_cycle("cpmg", "cpmg", as_fraction(7.0)))


def test_grid_rejects_sparse_switching(setup):
    model, grid, table = setup
    limit = np.pi / (grid.k_max * grid.omega0)
    grid.validate_spacing(limit)  # boundary case passes
    with pytest.raises(PlanError):
        grid.validate_spacing(limit * 1.01)


def test_table_column_inventory(setup):
    model, grid, table = setup
    assert table.pairs == ((1, 1), (1, 2), (2, 2))
    # self pairs: 33 + 32 real columns; cross: 33 + 32 + 32 + 33
    assert table.n_columns == 2 * 65 + 130
    assert not table.has_column((1, 1), "plus_im", 3)
    assert not table.has_column((1, 1), "minus_re", 0)
    assert table.label(table.col_index((1, 2), "minus_im", 4)) == "minus_im[1,2]@k4"


def test_decompose_reproduces_spectra(setup):
    model, grid, table = setup
    truth = table.truth_vector()
    for a, b in ((1, 1), (1, 2), (2, 1), (0, 1), (0, 0)):
        for k in (-7, -1, 1, 4):
            val = sum(coeff * truth[col] for col, coeff in table.decompose(a, b, k))
            want = model.cross_spectrum(a, b, np.array([k * grid.omega0]))[0]
            assert val == pytest.approx(want, rel=1e-12, abs=1e-15)


# ----------------------------------------------------------------------
# comb rows against the quadrature engine

# (schedule factory, repetitions, combo, engine reference, teeth-only bound)
ROW_CASES = [
    ("cpmg_cpmg c3_0", lambda: pair_cycle("cpmg", "cpmg", BASE / 4), 20,
     C_DIAG_BOTH, 4.14422666, 5e-3),
    ("cpmg_cpmg c1_0", lambda: pair_cycle("cpmg", "cpmg", BASE / 4), 20,
     C_DIAG_1, 2.07211333, 5e-3),
    ("cpmg_cpmg d_minus", lambda: pair_cycle("cpmg", "cpmg", BASE / 4), 20,
     D_MINUS, -0.885495768j, 2e-2),
    ("cdd3_cpmg c3_0", lambda: pair_cycle("cdd3", "cpmg", BASE / 4), 20,
     C_DIAG_BOTH, 3.34927294, 1e-3),
    ("cdd3_cpmg c3_3", lambda: pair_cycle("cdd3", "cpmg", BASE / 4), 20,
     C_CROSS, 1.56828786, 2e-2),
    ("cdd3_cdd1 c3_3", lambda: pair_cycle("cdd3", "cdd1", BASE / 4), 20,
     C_CROSS, -1.53618159, 2e-2),
    ("cdd1x2_cdd1 d_plus", lambda: pair_cycle("cdd1x2", "cdd1", BASE / 4), 20,
     D_PLUS, -0.0123928667j, 1e-3),
    ("uneven c3_3", lambda: pair_cycle("uneven_cdd1", "uneven_cdd1", BASE / 16), 35,
     C_CROSS, 1.87277069, 2e-2),
    ("delta_plus d_plus", lambda: delta_plus_cycle(BASE / 2, 1), 15,
     D_PLUS, -0.0108495791j, 1e-3),
    ("delta_minus n8 d_minus", lambda: delta_minus_cycle(BASE / 8, 2), 20,
     D_MINUS, 0.213448389j, 8e-2),
]


@pytest.mark.parametrize("case", ROW_CASES, ids=[c[0] for c in ROW_CASES])
def test_comb_row_matches_engine(setup, case):
    model, grid, table = setup
    name, factory, reps, combo, reference, bound = case
    schedule = factory()
    exact = engine_value(schedule, model, reps, combo)
    assert exact == pytest.approx(reference, rel=1e-6)
    row, meta = comb_row(schedule, model, reps, combo, grid, table)
    predicted = row @ table.truth_vector()
    assert abs(predicted - exact) <= bound * abs(exact)
    assert meta["repetitions"] == reps


def test_fejer_sidelobes_shrink_with_repetitions(setup):
    model, grid, table = setup
    schedule = pair_cycle("cpmg", "cpmg", BASE / 4)
    truth = table.truth_vector()
    rels = []
    for m in (5, 10, 20, 40):
        exact = engine_value(schedule, model, m, C_DIAG_1)
        row, _ = comb_row(schedule, model, m, C_DIAG_1, grid, table)
        rels.append(abs(row @ truth - exact) / abs(exact))
    assert rels[1] < rels[0] and rels[2] < rels[1] and rels[3] < rels[2]
    assert rels[3] < rels[0] / 4


def test_background_correction_closes_fejer_rows(setup):
    model, grid, table = setup
    truth = table.truth_vector()
    estimates = SpectrumEstimates(table)
    estimates.values = truth.copy()
    plan = [
        PlanEntry("delta_minus_pi1_n2", delta_minus_cycle(BASE / 2, 1), 15, (D_MINUS,)),
        PlanEntry("delta_minus_pi2_n8", delta_minus_cycle(BASE / 8, 2), 20, (D_MINUS,)),
    ]
    corrections = background_corrections(
        plan, model, grid, table, estimates, labels={"d_minus"}, omega_max=9.0
    )
    for entry, raw_floor, closed in ((plan[0], 0.5, 2e-3), (plan[1], 0.02, 5e-4)):
        exact = engine_value(entry.schedule, model, entry.repetitions, D_MINUS)
        row, _ = comb_row(entry.schedule, model, entry.repetitions, D_MINUS, grid, table)
        teeth_only = abs(row @ truth - exact) / abs(exact)
        corrected = abs(row @ truth + corrections[(entry.name, "d_minus")] - exact)
        assert teeth_only > raw_floor  # the sidelobe content is material
        assert corrected <= closed * abs(exact)


def test_delta_cycles_have_pure_combs(setup):
    model, grid, table = setup
    plus = delta_plus_cycle(BASE / 2, 1)
    minus = delta_minus_cycle(BASE / 2, 1)
    assert plus.is_net_identity and minus.is_net_identity
    assert all(kp == 0 for kp, _ in net_brackets(plus, model, D_PLUS).values())
    assert all(km == 0 for _, km in net_brackets(minus, model, D_MINUS).values())


def test_delta_plus_rows_weight_self_spectra_oppositely(setup):
    model, grid, table = setup
    row, _ = comb_row(delta_plus_cycle(BASE / 2, 1), model, 15, D_PLUS, grid, table)
    w11 = row[table.col_index((1, 1), "minus_re", 2)]
    w22 = row[table.col_index((2, 2), "minus_re", 2)]
    assert abs(w11) > 1.0
    assert w11 == pytest.approx(-w22, rel=1e-12)


# ----------------------------------------------------------------------
# linear algebra layer


def synthetic_rows(model, grid, table, entries, labels):
    """Rows plus consistent right-hand sides built from the truth vector."""
    truth = table.truth_vector()
    rows = []
    for entry in entries:
        for combo in entry.combos:
            if combo.label not in labels:
                continue
            row, meta = comb_row(entry.schedule, model, entry.repetitions, combo, grid, table)
            rows.append(((entry.name, combo.label), row, row @ truth, meta))
    return rows


def stage_plan(grid):
    return build_plan(grid, include_swap=False, dc_harmonic=None)


def test_solver_recovers_synthetic_truth(setup):
    model, grid, table = setup
    entries = [e for e in stage_plan(grid) if e.name.startswith("cpmg_cpmg")]
    rows = synthetic_rows(model, grid, table, entries, {"c1_0"})
    columns = table.columns_for(pairs=[(1, 1)], comps=("plus_re",), k_min=1)
    system = realize_system(rows, table, columns)
    result = solve_system(system)
    truth = table.truth_vector()[columns]
    assert np.max(np.abs(result.x - truth)) <= 1e-10 * np.max(np.abs(truth))
    assert result.condition < 1e3
    # perturbation response stays within the condition-number bound
    noisy = realize_system(
        [(k, r, v * (1.0 + 3e-4), m) for k, r, v, m in rows], table, columns
    )
    shifted = solve_system(noisy)
    rel_out = np.linalg.norm(shifted.x - result.x) / np.linalg.norm(result.x)
    assert rel_out <= 10.0 * result.condition * 3e-4


def test_solver_flags_rank_deficiency(setup):
    model, _, _ = setup
    grid4 = HarmonicGrid(60.0, 4)
    table4 = SpectrumTable(model, grid4)
    named_plan = {e.name: e for e in stage_plan(grid4)}
    # even-harmonic cycles only: k=1 and k=3 are never interrogated
    entries = [
        PlanEntry("a", named_plan["cpmg_cpmg_n2"].schedule, 20, (C_DIAG_1,)),
        PlanEntry("b", named_plan["cpmg_cpmg_n2"].schedule, 25, (C_DIAG_1,)),
        PlanEntry("c", named_plan["cpmg_cpmg_n4"].schedule, 20, (C_DIAG_1,)),
        PlanEntry("d", named_plan["cpmg_cpmg_n4"].schedule, 25, (C_DIAG_1,)),
    ]
    rows = synthetic_rows(model, grid4, table4, entries, {"c1_0"})
    columns = table4.columns_for(pairs=[(1, 1)], comps=("plus_re",), k_min=1)
    with pytest.raises(RankDeficientError) as err:
        solve_system(realize_system(rows, table4, columns))
    named = " ".join(str(d) for d in err.value.directions)
    assert "plus_re[1,1]@k1" in named or "plus_re[1,1]@k3" in named
    # truncated SVD instead returns the minimum-norm completion
    result = solve_system(
        realize_system(rows, table4, columns), regularization="truncated_svd"
    )
    truth = table4.truth_vector()[columns]
    assert result.x[0] == pytest.approx(0.0, abs=1e-12)  # k=1 never touched
    assert result.x[1] == pytest.approx(truth[1], rel=1e-9)


def test_solver_condition_guard(setup):
    model, _, _ = setup
    grid6 = HarmonicGrid(60.0, 6)
    table6 = SpectrumTable(model, grid6)
    entries = [e for e in stage_plan(grid6) if e.name.startswith("cpmg_cpmg")]
    rows = synthetic_rows(model, grid6, table6, entries, {"c1_0"})
    columns = table6.columns_for(pairs=[(1, 1)], comps=("plus_re",), k_min=1)
    with pytest.raises(IllConditionedError):
        solve_system(realize_system(rows, table6, columns), cond_limit=1.0)


def test_leak_check_names_unmodeled_columns(setup):
    model, grid, table = setup
    entries = [e for e in stage_plan(grid) if e.name == "cpmg_cpmg_n2"]
    rows = synthetic_rows(model, grid, table, entries, {"c1_0"})
    narrow = table.columns_for(pairs=[(1, 1)], comps=("plus_re",), k_min=2, k_max=2)
    with pytest.raises(PlanError, match=r"plus_re\[1,1\]@k6"):
        realize_system(rows, table, narrow)


# ----------------------------------------------------------------------
# staged protocol on synthetic data


def test_step1_modes_agree_on_synthetic_data(setup):
    model, grid, table = setup
    plan = stage_plan(grid)
    labels = {"c1_0", "c2_0", "c3_0", "c3_3"}
    data = {
        key: value
        for key, _, value, _ in synthetic_rows(model, grid, table, plan, labels)
    }
    joint = protocol_diagonal_step1(data, plan, model, grid, table, mode="joint")
    split = protocol_diagonal_step1(data, plan, model, grid, table, mode="differenced")
    truth = table.truth_vector()
    assert set(joint.values) == set(split.values)
    for col, val in joint.values.items():
        assert val == pytest.approx(split.values[col], abs=1e-8)
        assert val == pytest.approx(truth[col], abs=1e-9)
    with pytest.raises(ValueError):
        protocol_diagonal_step1(data, plan, model, grid, table, mode="weird")


def test_step2_recovers_cross_minus(setup):
    model, grid, table = setup
    plan = stage_plan(grid)
    truth = table.truth_vector()
    data = {
        key: value
        for key, _, value, _ in synthetic_rows(
            model, grid, table, plan, {"d_minus", "d_plus"}
        )
    }
    estimates = SpectrumEstimates(table)
    plus_cols = table.columns_for(comps=("plus_re", "plus_im"))
    estimates.update(plus_cols, truth[plus_cols])
    step = protocol_diagonal_step2(data, plan, model, grid, table, estimates)
    for col, val in step.values.items():
        assert val == pytest.approx(truth[col], abs=1e-9)


def test_estimate_lookup_and_structural_zeros(setup):
    model, grid, table = setup
    estimates = SpectrumEstimates(table)
    assert estimates.value((1, 1), "minus_re", 0) == 0.0
    assert estimates.value((1, 2), "plus_im", 0) == 0.0
    with pytest.raises(KeyError):
        estimates.value((1, 1), "plus_im", 3)
    assert np.isnan(estimates.value((1, 1), "plus_re", 3))


def test_validate_plan_rejections(setup):
    model, grid, table = setup
    entry = PlanEntry("pair", pair_cycle("cpmg", "cpmg", BASE / 2), 5, (C_DIAG_1,))
    with pytest.raises(PlanError, match="duplicate"):
        validate_plan([entry, entry], model, grid)
    uneven = pair_cycle("uneven_cdd1", "uneven_cdd1", BASE / 16)
    bad_comb = PlanEntry("bad_alt", uneven, 5, (D_PLUS,))
    with pytest.raises(PlanError, match="displacement-antisymmetric"):
        validate_plan([bad_comb], model, grid)
    with pytest.raises(PlanError, match="repetition"):
        validate_plan(
            [PlanEntry("few", pair_cycle("cpmg", "cpmg", BASE / 2), 0, (C_DIAG_1,))],
            model,
            grid,
        )


def test_measure_plan_needs_rng_for_shots(setup):
    model, grid, table = setup
    plan = [PlanEntry("pair", pair_cycle("cpmg", "cpmg", BASE / 2), 5, (C_DIAG_1,))]
    with pytest.raises(ValueError):
        measure_plan(plan, model, shots=1000)
    exact = measure_plan(plan, model, omega_max=9.0)
    rng = np.random.default_rng(7)
    sampled = measure_plan(plan, model, omega_max=9.0, shots=200_000, rng=rng)
    key = ("pair", "c1_0")
    assert sampled[key] == pytest.approx(exact[key], abs=0.05)
    again = measure_plan(
        plan, model, omega_max=9.0, shots=200_000, rng=np.random.default_rng(7)
    )
    assert again[key] == sampled[key]


def test_nondiagonal_needs_swap_entries(setup):
    model, grid, table = setup
    plan = stage_plan(grid)
    estimates = SpectrumEstimates(table)
    with pytest.raises(PlanError, match="swap"):
        protocol_nondiagonal_self({}, plan, model, grid, table, estimates)


# ----------------------------------------------------------------------
# interpolants and derived quantities


def test_component_interpolant_accuracy_and_parity(setup):
    model, grid, table = setup
    truth = table.truth_vector()
    estimates = SpectrumEstimates(table)
    estimates.values = truth.copy()
    samples = estimates.component((1, 1), "plus_re")
    fn = component_interpolant(grid, samples, "even")
    w = np.linspace(0.0, grid.omega(grid.k_max), 700)
    exact = np.array([split_spectrum(model, 1, 1, np.array([wi]))[0][0].real for wi in w])
    peak = np.max(np.abs(exact))
    assert np.max(np.abs(fn(w) - exact)) <= 0.02 * peak
    assert np.allclose(fn(-w), fn(w), atol=1e-12)
    odd = component_interpolant(grid, estimates.component((1, 1), "minus_re"), "odd")
    assert np.allclose(odd(-w), -odd(w), atol=1e-12)
    # far tail decays monotonically
    far = np.linspace(grid.omega(grid.k_max), 3 * grid.omega(grid.k_max), 50)
    tail = np.abs(fn(far))
    assert np.all(np.diff(tail) <= 1e-15)


def test_component_interpolant_input_checks(setup):
    model, grid, table = setup
    good = np.ones(grid.k_max + 1)
    with pytest.raises(ValueError):
        component_interpolant(grid, good[:-1], "even")
    with pytest.raises(ValueError):
        component_interpolant(grid, np.where(np.arange(33) == 5, np.nan, good), "even")
    with pytest.raises(ValueError):
        component_interpolant(grid, good, "sideways")


def test_reconstructed_bath_subsets(setup):
    model, grid, table = setup
    estimates = SpectrumEstimates(table)
    estimates.values = table.truth_vector().copy()
    w = grid.omega0 * np.array([-9.0, -2.0, 2.0, 9.0])
    full = ReconstructedBath(table, grid, estimates, subset="full")
    exact = model.cross_spectrum(1, 2, w)
    assert np.max(np.abs(full.cross_spectrum(1, 2, w) - exact)) <= 0.02 * np.max(np.abs(exact))
    assert full.has_pair(0, 1) == model.has_pair(0, 1)
    assert full.has_pair(1, 2) and full.has_pair(2, 2)
    classical = ReconstructedBath(table, grid, estimates, subset="classical")
    vals = classical.cross_spectrum(1, 2, w)
    assert np.allclose(vals, np.conj(vals[::-1]), atol=1e-13)  # symmetric content only
    s_plus = split_spectrum(model, 1, 2, w)[0]
    assert np.max(np.abs(vals - 0.5 * s_plus)) <= 0.02 * np.max(np.abs(s_plus))
    partial = ReconstructedBath(table, grid, estimates, subset="no_self_minus")
    self_vals = partial.cross_spectrum(1, 1, w)
    assert np.allclose(self_vals, np.conj(self_vals[::-1]), atol=1e-13)
    cross_vals = partial.cross_spectrum(1, 2, w)
    assert not np.allclose(cross_vals, np.conj(cross_vals[::-1]), atol=1e-6)
    with pytest.raises(ValueError):
        ReconstructedBath(table, grid, estimates, subset="everything")


def test_temperature_roundtrip_and_degeneracy(setup):
    model, grid, table = setup
    estimates = SpectrumEstimates(table)
    estimates.values = table.truth_vector().copy()
    fit = estimate_temperature(estimates, grid)
    assert fit.beta == pytest.approx(model.beta, rel=1e-6)
    assert fit.temperature_K == pytest.approx(5.0, rel=1e-6)
    flat = SpectrumEstimates(table)
    flat.values = table.truth_vector().copy()
    minus_cols = table.columns_for(comps=("minus_re", "minus_im"))
    flat.update(minus_cols, np.zeros(minus_cols.size))
    with pytest.raises(ValueError):
        estimate_temperature(flat, grid)


def test_high_temperature_ratio_limit(setup):
    model, grid, table = setup
    beta = 1e-4
    hot = exciton_model()
    hot.beta = beta
    hot_table = SpectrumTable(hot, HarmonicGrid(60.0, 32))
    estimates = SpectrumEstimates(hot_table)
    estimates.values = hot_table.truth_vector().copy()
    fit = estimate_temperature(estimates, hot_table.grid)
    assert fit.beta == pytest.approx(beta, rel=1e-4)
    # in this regime S+/S- approaches 2/(beta w)
    k = 8
    w = hot_table.grid.omega(k)
    ratio = estimates.value((1, 2), "plus_re", k) / estimates.value((1, 2), "minus_re", k)
    assert ratio == pytest.approx(2.0 / (beta * w), rel=1e-4)


def test_spectral_density_from_truth(setup):
    model, grid, table = setup
    estimates = SpectrumEstimates(table)
    estimates.values = table.truth_vector().copy()
    omegas, values = estimate_spectral_density(estimates, grid, model.beta)
    expect = model.density(omegas)
    assert np.max(np.abs(values - expect)) <= 1e-10 * np.max(expect)
    with pytest.raises(ValueError):
        estimate_spectral_density(estimates, grid, model.beta, k_min=0)


# ----------------------------------------------------------------------
# full pipeline checks (session-scoped runs)


def test_pipeline_reaches_spectra_floor(exciton_run):
    model, grid, res = exciton_run
    table = res.table
    truth = table.truth_vector()
    for pair, comp in (
        ((1, 1), "plus_re"),
        ((1, 2), "plus_re"),
        ((1, 2), "plus_im"),
        ((1, 2), "minus_re"),
        ((1, 2), "minus_im"),
    ):
        tv = np.array(
            [
                truth[table.col_index(pair, comp, k)]
                if table.has_column(pair, comp, k)
                else 0.0
                for k in range(grid.k_max + 1)
            ]
        )
        ev = res.estimates.component(pair, comp)
        sel = np.abs(tv) >= 0.05 * np.max(np.abs(tv))
        rel = np.max(np.abs(ev[sel] - tv[sel]) / np.abs(tv[sel]))
        assert rel <= 0.05, f"{comp}[{pair}] off by {rel:.3f}"


def test_pipeline_conditions_and_thermometry(exciton_run):
    model, grid, res = exciton_run
    assert max(res.conditions.values()) < 1e3
    assert res.beta == pytest.approx(model.beta, rel=0.01)


def test_self_minus_routes_agree(exciton_run):
    model, grid, res = exciton_run
    table = res.table
    truth = table.truth_vector()
    assert res.swap_estimates is not None
    for pair in ((1, 1), (2, 2)):
        tv = np.array(
            [
                truth[table.col_index(pair, "minus_re", k)]
                if table.has_column(pair, "minus_re", k)
                else 0.0
                for k in range(grid.k_max + 1)
            ]
        )
        primary = res.estimates.component(pair, "minus_re")
        swapped = res.swap_estimates.component(pair, "minus_re")
        sel = np.abs(tv) >= 0.10 * np.max(np.abs(tv))
        gap = np.abs(primary[sel] - swapped[sel]) / np.abs(tv[sel])
        assert np.max(gap) <= 0.25
        assert np.median(gap) <= 0.05


def test_m1_run_uses_swap_route(exciton_run_m1):
    model, grid, res = exciton_run_m1
    assert res.swap_estimates is None
    assert any("self coefficients vanish" in note for note in res.notes)
    table = res.table
    truth = table.truth_vector()
    for pair in ((1, 1), (2, 2)):
        tv = np.array(
            [
                truth[table.col_index(pair, "minus_re", k)]
                if table.has_column(pair, "minus_re", k)
                else 0.0
                for k in range(grid.k_max + 1)
            ]
        )
        ev = res.estimates.component(pair, "minus_re")
        sel = np.abs(tv) >= 0.10 * np.max(np.abs(tv))
        rel = np.abs(ev[sel] - tv[sel]) / np.abs(tv[sel])
        assert np.max(rel) <= 0.15
        assert np.median(rel) <= 0.05
    assert res.beta == pytest.approx(model.beta, rel=0.01)
