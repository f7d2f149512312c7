"""Command-line harness: configured runs, CSV export, and self-validation.

Subcommands: simulate (coefficient/expectation tables for a measurement
plan), reconstruct (full spectra pipeline plus thermometry), predict
(coherence-phase and fidelity trajectories under reconstructed spectra),
and validate (fast oracle cross-checks with a nonzero exit on failure).
All outputs are plain CSV with unit-carrying headers plus a JSON run
manifest; identical config and seed give byte-identical files.
"""

import argparse
import csv
import hashlib
import json
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bath import (
    HBAR_OVER_KB_K_PS,
    DephasingModel,
    OhmicDensity,
    inverse_temperature_ps,
    thermal_spectrum,
)
from .control import as_fraction, compile_sequence, library_sequence, overlay
from .control import from_config as sequence_from_config
from .driven import tcl2_evolve
from .dynamics import (
    DegenerateMeasurementError,
    evolve_density,
    haar_states,
    invert_expectations,
    multiplier_matrix,
    predicted_expectations,
    qubit1_coherence,
    sample_expectations,
    state_fidelities,
    window_coefficients,
)
from .filters import CycleCache, FilterEvaluator, estimate_orders, symmetric_nodes
from .oracle import BosonMode, FewModeBath, fock_multipliers, fock_prediction, mc_multipliers
from .reconstruction import (
    C_CROSS,
    C_DIAG_1,
    C_DIAG_2,
    C_DIAG_BOTH,
    D_MINUS,
    D_PLUS,
    SELF_1,
    SELF_2,
    HarmonicGrid,
    PlanEntry,
    PlanError,
    PREDICTION_SUBSETS,
    ReconstructedBath,
    SpectrumEstimates,
    SpectrumTable,
    build_plan,
    delta_minus_cycle,
    delta_plus_cycle,
    measure_plan,
    pair_cycle,
    run_reconstruction,
    validate_plan,
)

COMBOS_BY_LABEL = {
    c.label: c
    for c in (C_DIAG_1, C_DIAG_2, C_DIAG_BOTH, C_CROSS, D_PLUS, D_MINUS, SELF_1, SELF_2)
}

SPECTRUM_COMPONENTS = ("plus_re", "plus_im", "minus_re", "minus_im")


class ConfigError(ValueError):
    """Configuration problem, annotated with the file and field at fault."""


# CLI sentinel: distinguishes "flag not given" from an explicit exact/None
UNSET = object()


# ----------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """Validated run settings: model, plan, grid, sampling, and output."""

    path: Path
    config_sha256: str
    model: DephasingModel
    plan: list
    grid: HarmonicGrid
    output_dir: Path
    seed: int = 0
    threads: int = 1
    shots: int = None
    omega_max: float = None
    trajectory: dict = None
    predict: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path, out=None, seed=None, threads=None, shots=UNSET):
        """Load and validate a JSON config; CLI values override file values.

        Raises ConfigError naming the offending file and field for every
        rejected setting, including plans whose switching intervals are
        too coarse for the harmonic grid.
        """
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"{path}: no such config file")
        blob = path.read_bytes()
        digest = hashlib.sha256(blob).hexdigest()
        try:
            raw = json.loads(blob)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}:{err.lineno}:{err.colno}: {err.msg}") from err
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")

        def fail(field_name, message):
            raise ConfigError(f"{path}: {field_name}: {message}")

        grid_cfg = raw.get("grid")
        if not isinstance(grid_cfg, dict):
            fail("grid", "missing object with base_period_ps and k_max")
        try:
            grid = HarmonicGrid(float(grid_cfg["base_period_ps"]), int(grid_cfg["k_max"]))
        except (KeyError, TypeError, ValueError) as err:
            fail("grid", str(err))

        model = _load_model(path, raw, fail)
        plan = _load_plan(path, raw, grid, model, fail)

        seed = int(raw.get("seed", 0)) if seed is None else int(seed)
        threads = int(raw.get("threads", 1)) if threads is None else int(threads)
        if threads < 1:
            fail("threads", f"must be >= 1, got {threads}")
        if shots is UNSET:
            shots = raw.get("shots", "exact")
        if shots in ("exact", None):
            shots = None
        else:
            shots = int(shots)
            if shots < 1:
                fail("shots", f"must be a positive count or 'exact', got {shots}")

        out_dir = Path(out) if out is not None else Path(raw.get("output_dir", "out"))
        if not out_dir.is_absolute():
            out_dir = path.parent / out_dir

        omega_max = raw.get("omega_max_rad_per_ps")
        omega_max = None if omega_max is None else float(omega_max)

        trajectory = raw.get("trajectory")
        if trajectory is not None:
            trajectory = _check_trajectory(trajectory, model, fail)
        predict = _check_predict(raw.get("predict", {}), fail)

        return cls(
            path=path,
            config_sha256=digest,
            model=model,
            plan=plan,
            grid=grid,
            output_dir=out_dir,
            seed=seed,
            threads=threads,
            shots=shots,
            omega_max=omega_max,
            trajectory=trajectory,
            predict=predict,
        )


def _load_model(path, raw, fail):
    ref = raw.get("model_file")
    if not ref:
        fail("model_file", "missing reference to a model JSON file")
    model_path = path.parent / ref
    if not model_path.is_file():
        fail("model_file", f"no such file {model_path}")
    try:
        cfg = json.loads(model_path.read_bytes())
        return DephasingModel.from_config(cfg, classical=cfg.get("classical"))
    except json.JSONDecodeError as err:
        fail("model_file", f"{model_path}:{err.lineno}: {err.msg}")
    except (KeyError, TypeError, ValueError) as err:
        fail("model_file", f"{model_path}: {err}")


def _load_plan(path, raw, grid, model, fail):
    ref = raw.get("plan_file")
    if not ref:
        fail("plan_file", "missing reference to a plan JSON file")
    plan_path = path.parent / ref
    if not plan_path.is_file():
        fail("plan_file", f"no such file {plan_path}")
    try:
        cfg = json.loads(plan_path.read_bytes())
    except json.JSONDecodeError as err:
        fail("plan_file", f"{plan_path}:{err.lineno}: {err.msg}")
    try:
        plan = _plan_from_config(cfg, grid, model)
        validate_plan(plan, model, grid)
    except (KeyError, TypeError, ValueError, PlanError) as err:
        fail("plan_file", f"{plan_path}: {err}")
    return plan


def _plan_from_config(cfg, grid, model):
    kind = cfg.get("kind", "default")
    if kind == "default":
        reps = cfg.get("repetitions")
        return build_plan(
            grid,
            include_swap=bool(cfg.get("include_swap", True)),
            repetitions=(lambda n: int(reps)) if reps is not None else None,
            dc_harmonic=cfg.get("dc_harmonic", 16),
            dc_repetitions=int(cfg.get("dc_repetitions", 35)),
        )
    if kind != "explicit":
        raise ValueError(f"unknown plan kind {kind!r}")
    base = as_fraction(grid.base_period)
    plan = []
    for item in cfg["entries"]:
        name = item["name"]
        for label in item["combos"]:
            if label not in COMBOS_BY_LABEL:
                raise ValueError(
                    f"entry {name!r}: unknown combo label {label!r}; "
                    f"choose from {sorted(COMBOS_BY_LABEL)}"
                )
        combos = tuple(COMBOS_BY_LABEL[label] for label in item["combos"])
        if "cycle" in item:
            factory = {"delta_plus": delta_plus_cycle, "delta_minus": delta_minus_cycle}[
                item["cycle"]
            ]
            schedule = factory(base / int(item["harmonic"]), int(item.get("flip_qubit", 1)))
        elif "qubit1" in item:
            schedule = pair_cycle(item["qubit1"], item["qubit2"], base / int(item["harmonic"]))
        else:
            schedule = compile_sequence(
                sequence_from_config(item["sequence"], n_qubits=model.n_qubits)
            )
        plan.append(PlanEntry(name, schedule, int(item["repetitions"]), combos))
    return plan


def _check_trajectory(cfg, model, fail):
    out = {
        "qubit1": cfg.get("qubit1", "free"),
        "qubit2": cfg.get("qubit2", "free"),
        "t_max_ps": float(cfg.get("t_max_ps", 240.0)),
        "points": int(cfg.get("points", 48)),
    }
    if out["t_max_ps"] <= 0:
        fail("trajectory.t_max_ps", "must be positive")
    if out["points"] < 1:
        fail("trajectory.points", "needs at least one time sample")
    try:
        _trajectory_schedule(out, model, out["t_max_ps"])
    except (KeyError, ValueError) as err:
        fail("trajectory", str(err))
    return out


def _check_predict(cfg, fail):
    out = {
        "subsets": list(cfg.get("subsets", PREDICTION_SUBSETS)),
        "n_states": int(cfg.get("n_states", 200)),
        "omega_max_rad_per_ps": cfg.get("omega_max_rad_per_ps"),
        "free": {
            "t_max_ps": float(cfg.get("free", {}).get("t_max_ps", 240.0)),
            "points": int(cfg.get("free", {}).get("points", 48)),
        },
        "controlled": {
            "qubit1": cfg.get("controlled", {}).get("qubit1", "cdd3"),
            "qubit2": cfg.get("controlled", {}).get("qubit2", "cdd2"),
            "cycle_ps": float(cfg.get("controlled", {}).get("cycle_ps", 2.7)),
            "cycles": int(cfg.get("controlled", {}).get("cycles", 74)),
            "stride": int(cfg.get("controlled", {}).get("stride", 3)),
        },
    }
    for subset in out["subsets"]:
        if subset not in PREDICTION_SUBSETS:
            fail("predict.subsets", f"unknown subset {subset!r}; choose from {PREDICTION_SUBSETS}")
    if out["n_states"] < 1:
        fail("predict.n_states", "needs at least one probe state")
    if out["controlled"]["cycles"] < 1 or out["controlled"]["stride"] < 1:
        fail("predict.controlled", "cycles and stride must be >= 1")
    return out


# ----------------------------------------------------------------------
# output helpers


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.12e}"
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_manifest(config, command, outputs, extra=None):
    """Reproducibility record: config hash, versions, seeds, constants.

    Deliberately carries no timestamps so reruns stay byte-identical.
    """
    manifest = {
        "command": command,
        "config_file": config.path.name,
        "config_sha256": config.config_sha256,
        "seed": config.seed,
        "shots": "exact" if config.shots is None else config.shots,
        "threads": config.threads,
        "versions": {
            "mqns": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "scipy": scipy.__version__,
        },
        "constants": {
            "hbar_over_kb_K_ps": HBAR_OVER_KB_K_PS,
            "hbar_over_kb_note": (
                "CODATA 2018: hbar = 1.054571817e-34 J s divided by the exact "
                "SI k_B = 1.380649e-23 J/K gives 7.638232577 K ps; inverse "
                "temperatures are beta_ps = hbar_over_kb_K_ps / T_K."
            ),
        },
        "outputs": sorted(outputs),
    }
    if extra:
        manifest.update(extra)
    path = config.output_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _parallel_map(fn, items, threads):
    """Order-preserving map; thread count never changes the results."""
    items = list(items)
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _exact_coefficients(config):
    """Per-entry class coefficients for the plan, evaluated in parallel."""

    def one(entry):
        return entry.name, window_coefficients(
            entry.schedule,
            config.model,
            repetitions=entry.repetitions,
            omega_max=config.omega_max,
        )

    return dict(_parallel_map(one, config.plan, config.threads))


# ----------------------------------------------------------------------
# simulate


def _trajectory_schedule(cfg, model, duration):
    seqs = [
        library_sequence(cfg[f"qubit{q}"], as_fraction(duration), qubit=q, n_qubits=model.n_qubits)
        for q in range(1, min(model.n_qubits, 2) + 1)
    ]
    seq = seqs[0]
    for other in seqs[1:]:
        seq = overlay(seq, other)
    return compile_sequence(seq)


def cmd_simulate(config):
    """Coefficient, expectation, and coherence tables for the plan."""
    config.output_dir.mkdir(parents=True, exist_ok=True)
    coeff_map = _exact_coefficients(config)
    rng = np.random.default_rng(config.seed)
    coeff_rows, expect_rows, degenerate = [], [], []
    for entry in config.plan:
        coeffs = coeff_map[entry.name]
        expect = predicted_expectations(coeffs)
        if config.shots is not None:
            expect = sample_expectations(expect, config.shots, rng)
            try:
                coeffs = invert_expectations(expect)
            except DegenerateMeasurementError:
                # a fully decayed signal at this shot count; keep the raw
                # expectations and mark the coefficients unresolvable
                coeffs = None
                degenerate.append(entry.name)
        for setting in sorted(expect):
            val = complex(expect[setting])
            expect_rows.append((entry.name, setting, val.real, val.imag))
        for combo in entry.combos:
            if coeffs is None:
                val = complex(np.nan, np.nan)
            else:
                val = complex(
                    sum(lam * complex(coeffs[s].get(c, 0.0)) for lam, s, c in combo.terms)
                )
            coeff_rows.append(
                (
                    entry.name,
                    combo.label,
                    entry.repetitions,
                    float(entry.schedule.duration),
                    val.real,
                    val.imag,
                )
            )
    outputs = []
    write_csv(
        config.output_dir / "coefficients.csv",
        ("entry", "combo", "repetitions", "cycle_ps",
         "coefficient_re_dimensionless", "coefficient_im_dimensionless"),
        coeff_rows,
    )
    outputs.append("coefficients.csv")
    write_csv(
        config.output_dir / "expectations.csv",
        ("entry", "setting", "expectation_re_dimensionless", "expectation_im_dimensionless"),
        expect_rows,
    )
    outputs.append("expectations.csv")

    if config.trajectory is not None:
        cfg = config.trajectory
        times = cfg["t_max_ps"] * np.arange(1, cfg["points"] + 1) / cfg["points"]
        dim = 1 << config.model.n_qubits
        rho0 = np.full((dim, dim), 1.0 / dim)

        def coherence(t):
            sched = _trajectory_schedule(cfg, config.model, t)
            coeffs = window_coefficients(sched, config.model, omega_max=config.omega_max)
            mult = multiplier_matrix(coeffs, config.model.n_qubits)
            return qubit1_coherence(evolve_density(rho0, mult))

        chis = np.array(_parallel_map(coherence, times, config.threads))
        phases = np.unwrap(np.angle(chis))
        write_csv(
            config.output_dir / "trajectory.csv",
            ("t_ps", "coherence_re_dimensionless", "coherence_im_dimensionless",
             "coherence_abs_dimensionless", "phase_rad"),
            [
                (float(t), chi.real, chi.imag, float(abs(chi)), float(ph))
                for t, chi, ph in zip(times, chis, phases)
            ],
        )
        outputs.append("trajectory.csv")

    extra = {"degenerate_entries": degenerate} if degenerate else None
    write_manifest(config, "simulate", outputs, extra)
    return 0


# ----------------------------------------------------------------------
# reconstruct


def _spectra_rows(table, grid, estimates):
    rows = []
    for pair in table.pairs:
        for comp in SPECTRUM_COMPONENTS:
            for k in range(grid.k_max + 1):
                if not table.has_column(pair, comp, k):
                    continue
                val = estimates.value(pair, comp, k)
                if not np.isfinite(val):
                    continue
                rows.append((pair[0], pair[1], comp, k, grid.omega(k), float(val)))
    return rows


SPECTRA_HEADER = (
    "qubit_a", "qubit_b", "component", "harmonic", "omega_rad_per_ps", "spectrum_per_ps"
)


def cmd_reconstruct(config):
    """Run every reconstruction stage and export spectra plus reports."""
    config.output_dir.mkdir(parents=True, exist_ok=True)
    coeff_map = _exact_coefficients(config)
    rng = np.random.default_rng(config.seed) if config.shots is not None else None
    data = measure_plan(
        config.plan,
        config.model,
        omega_max=config.omega_max,
        shots=config.shots,
        rng=rng,
        coefficient_map=coeff_map,
    )
    result = run_reconstruction(
        config.model, config.grid, plan=config.plan, omega_max=config.omega_max, data=data
    )
    outputs = []
    write_csv(
        config.output_dir / "spectra.csv",
        SPECTRA_HEADER,
        _spectra_rows(result.table, config.grid, result.estimates),
    )
    outputs.append("spectra.csv")
    if result.swap_estimates is not None:
        write_csv(
            config.output_dir / "spectra_swap.csv",
            SPECTRA_HEADER,
            _spectra_rows(result.table, config.grid, result.swap_estimates),
        )
        outputs.append("spectra_swap.csv")

    thermo_rows = []
    if result.beta is not None:
        thermo_rows.append((result.beta, result.temperature_K))
    write_csv(config.output_dir / "thermometry.csv", ("beta_ps", "temperature_K"), thermo_rows)
    outputs.append("thermometry.csv")

    if result.density_values is not None:
        write_csv(
            config.output_dir / "density.csv",
            ("harmonic", "omega_rad_per_ps", "coupling_density_per_ps"),
            [
                (k + 1, float(w), float(J))
                for k, (w, J) in enumerate(zip(result.density_omegas, result.density_values))
            ],
        )
        outputs.append("density.csv")

    write_csv(
        config.output_dir / "conditions.csv",
        ("solve", "condition_dimensionless", "residual_dimensionless"),
        [
            (name, float(result.conditions[name]), float(result.residuals[name]))
            for name in sorted(result.conditions)
        ],
    )
    outputs.append("conditions.csv")

    extra = {"notes": list(result.notes)}
    if result.beta is not None:
        extra["temperature_K"] = result.temperature_K
    write_manifest(config, "reconstruct", outputs, extra)
    return 0


# ----------------------------------------------------------------------
# predict


def load_spectra(config):
    """SpectrumEstimates rebuilt from a reconstruct run's spectra.csv."""
    path = config.output_dir / "spectra.csv"
    if not path.is_file():
        raise ConfigError(f"{path}: missing reconstruction output; run reconstruct first")
    table = SpectrumTable(config.model, config.grid)
    estimates = SpectrumEstimates(table)
    columns, values = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pair = (int(row["qubit_a"]), int(row["qubit_b"]))
            columns.append(table.col_index(pair, row["component"], int(row["harmonic"])))
            values.append(float(row["spectrum_per_ps"]))
    if not columns:
        raise ConfigError(f"{path}: no spectrum rows to load")
    estimates.update(np.array(columns), np.array(values))
    return table, estimates


def _evolution_summary(sources, schedule, repetitions, omega_max, states, rho0, n_qubits):
    """Phase and fidelity of every source bath on one control window."""
    out = {}
    for label, bath in sources.items():
        coeffs = window_coefficients(schedule, bath, repetitions=repetitions, omega_max=omega_max)
        mult = multiplier_matrix(coeffs, n_qubits)
        chi = qubit1_coherence(evolve_density(rho0, mult))
        out[label] = (chi, state_fidelities(states, mult))
    return out


def _scenario_rows(config, sources, windows, omega_max, states):
    """(phase rows, fidelity rows) across a list of (t, schedule, reps)."""
    n = config.model.n_qubits
    dim = 1 << n
    rho0 = np.full((dim, dim), 1.0 / dim)

    def one(window):
        t, schedule, reps = window
        return _evolution_summary(sources, schedule, reps, omega_max, states, rho0, n)

    results = _parallel_map(one, windows, config.threads)
    labels = [label for label in sources if label != "truth"]
    phase_rows, fid_rows = [], []
    chis = {label: np.array([r[label][0] for r in results]) for label in sources}
    phases = {label: np.unwrap(np.angle(chis[label])) for label in sources}
    for i, (t, _, _) in enumerate(windows):
        phase_rows.append(
            (float(t), float(phases["truth"][i]))
            + tuple(float(phases[label][i]) for label in labels)
        )
        f_truth = results[i]["truth"][1]
        row = [float(t), float(np.mean(f_truth))]
        for label in labels:
            f_sub = results[i][label][1]
            row.append(float(abs(np.mean(f_sub) - np.mean(f_truth))))
            row.append(float(np.max(np.abs(f_sub - f_truth))))
        fid_rows.append(tuple(row))
    return phase_rows, fid_rows


def cmd_predict(config):
    """Trajectories under the reconstructed spectra subsets vs the model."""
    config.output_dir.mkdir(parents=True, exist_ok=True)
    table, estimates = load_spectra(config)
    pred = config.predict
    omega_max = (
        pred["omega_max_rad_per_ps"]
        or config.omega_max
        or 3.0 * config.grid.omega(config.grid.k_max)
    )
    sources = {"truth": config.model}
    for subset in pred["subsets"]:
        sources[subset] = ReconstructedBath(table, config.grid, estimates, subset=subset)
    labels = [label for label in sources if label != "truth"]
    phase_header = ("t_ps", "phase_truth_rad") + tuple(f"phase_{s}_rad" for s in labels)
    fid_header = ("t_ps", "fidelity_truth_avg_dimensionless") + tuple(
        f"fidelity_gap_{kind}_{s}_dimensionless" for s in labels for kind in ("avg", "worst")
    )
    dim = 1 << config.model.n_qubits
    states = haar_states(pred["n_states"], dim, np.random.default_rng(config.seed))

    outputs = []
    free = pred["free"]
    times = free["t_max_ps"] * np.arange(1, free["points"] + 1) / free["points"]
    windows = [
        (t, _trajectory_schedule({"qubit1": "free", "qubit2": "free"}, config.model, t), 1)
        for t in times
    ]
    phase_rows, fid_rows = _scenario_rows(config, sources, windows, omega_max, states)
    write_csv(config.output_dir / "phase_free.csv", phase_header, phase_rows)
    write_csv(config.output_dir / "fidelity_free.csv", fid_header, fid_rows)
    outputs += ["phase_free.csv", "fidelity_free.csv"]

    ctrl = pred["controlled"]
    cycle = _trajectory_schedule(
        {"qubit1": ctrl["qubit1"], "qubit2": ctrl["qubit2"]}, config.model, ctrl["cycle_ps"]
    )
    reps = list(range(ctrl["stride"], ctrl["cycles"] + 1, ctrl["stride"]))
    if reps[-1] != ctrl["cycles"]:
        reps.append(ctrl["cycles"])
    windows = [(m * ctrl["cycle_ps"], cycle, m) for m in reps]
    phase_rows, fid_rows = _scenario_rows(config, sources, windows, omega_max, states)
    write_csv(config.output_dir / "phase_controlled.csv", phase_header, phase_rows)
    write_csv(config.output_dir / "fidelity_controlled.csv", fid_header, fid_rows)
    outputs += ["phase_controlled.csv", "fidelity_controlled.csv"]

    write_manifest(config, "predict", outputs, {"prediction_subsets": labels})
    return 0


# ----------------------------------------------------------------------
# validate


def _check_comb_identities(rng, inject):
    """Repetition combs against closed forms on random frequencies."""
    duration = as_fraction(1)
    seq = overlay(
        library_sequence("cpmg", duration, qubit=1, n_qubits=2),
        library_sequence("free", duration, qubit=2, n_qubits=2),
    )
    sched = compile_sequence(seq)
    nodes = symmetric_nodes(np.abs(rng.uniform(0.3, 20.0, size=13)))
    cycle = CycleCache(sched, nodes)
    half = CycleCache(sched.truncated(duration / 2), nodes)
    A, B = (1, 1), (0, 0)
    T = float(duration)
    worst = 0.0
    sign = -1.0 if inject == "gminus_sign" else 1.0
    for m in (3, 7):
        ev = FilterEvaluator(cycle, repetitions=m)
        fejer = np.sin(m * nodes * T / 2) ** 2 / np.sin(nodes * T / 2) ** 2
        want_plus = fejer * cycle.f1(A) * cycle.f1(B)[::-1]
        got_plus = ev.g_plus(A, B)
        want_minus = sign * (
            -np.sin(m * nodes * T) / np.sin(nodes * T / 2) * half.f1(A) * half.f1(B)[::-1]
        )
        got_minus = ev.g_minus(A, B)
        scale_p = float(np.max(np.abs(want_plus)))
        scale_m = float(np.max(np.abs(want_minus)))
        worst = max(
            worst,
            float(np.max(np.abs(got_plus - want_plus))) / scale_p,
            float(np.max(np.abs(got_minus - want_minus))) / scale_m,
        )
    return worst, 1e-10, "repetition comb closed forms, m in (3, 7)"


def _check_filter_orders(rng, inject):
    worst = 0.0
    for k in (1, 2):
        sched = compile_sequence(library_sequence(f"swap_cdd{k}", as_fraction(8), n_qubits=2))
        report = estimate_orders(sched)
        slopes = [s for pair, s in report["slopes"].items()]
        worst = max(worst, abs(min(slopes) - k))
    return worst, 0.1, "low-frequency filter order of swap-dressed cycles"


def _validate_model():
    return DephasingModel(
        n_qubits=1,
        density=OhmicDensity(0.001, 1.5),
        beta=inverse_temperature_ps(5.0),
        transit_times=np.zeros((1, 1)),
        zero_minus="all",
    )


def _check_mc_engine(rng, inject):
    model = _validate_model()
    sched = compile_sequence(library_sequence("cpmg", as_fraction(10), n_qubits=1))
    want = multiplier_matrix(window_coefficients(sched, model), 1)
    got = mc_multipliers(sched, model, 20000, rng, delta_omega=2 * np.pi / 240.0)
    err = np.abs(got.multipliers - want)
    bound = np.maximum(3.0 * got.stderr, 0.01)
    return float(np.max(err / bound)), 1.0, "Monte Carlo multipliers vs the analytic engine"


def _check_fock_engine(rng, inject):
    bath = FewModeBath(
        [BosonMode(1.1, 0.35, (0.03 + 0.015j, 0.02)), BosonMode(1.9, 0.2, (0.01, 0.025 - 0.01j))],
        collective=True,
    )
    seq = library_sequence("swap_cdd1", as_fraction(8), n_qubits=2)
    got = fock_multipliers(seq, bath)
    want = fock_prediction(seq, bath)
    return float(np.max(np.abs(got - want))), 1e-6, "exact Fock evolution vs the engine"


def _check_driven_balance(rng, inject):
    density = OhmicDensity(0.004, 1.5)
    beta = inverse_temperature_ps(5.0)
    res = tcl2_evolve(lambda w: thermal_spectrum(density, beta, w), 1.0, t_final=250.0, dt=0.05)
    ratio = res.steady_ratio()
    return float(abs(ratio / np.exp(beta * 1.0) - 1.0)), 0.05, "driven steady state vs e^(beta g)"


VALIDATION_CHECKS = (
    ("comb_identities", _check_comb_identities),
    ("filter_orders", _check_filter_orders),
    ("mc_vs_engine", _check_mc_engine),
    ("fock_vs_engine", _check_fock_engine),
    ("driven_balance", _check_driven_balance),
)


def cmd_validate(config, inject=None):
    """Fast oracle cross-checks; returns a nonzero code on any failure.

    `inject` flips a known-bad comparison (test fixture): "gminus_sign"
    negates the antisymmetric comb closed form, which the identity check
    must catch.
    """
    config.output_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    rows = []
    failed = 0
    for name, check in VALIDATION_CHECKS:
        metric, tolerance, detail = check(rng, inject)
        ok = metric <= tolerance
        failed += 0 if ok else 1
        status = "PASS" if ok else "FAIL"
        print(f"{status} {name}: {metric:.3e} (tolerance {tolerance:.3e}) - {detail}")
        rows.append((name, status, metric, tolerance, detail))
    write_csv(
        config.output_dir / "validation.csv",
        ("check", "status", "metric_dimensionless", "tolerance_dimensionless", "detail"),
        rows,
    )
    write_manifest(config, "validate", ["validation.csv"], {"failed_checks": failed})
    return 1 if failed else 0


# ----------------------------------------------------------------------
# entry point


def _shots_argument(text):
    if text == "exact":
        return None
    try:
        value = int(text)
    except ValueError as err:
        raise argparse.ArgumentTypeError("expected a positive integer or 'exact'") from err
    if value < 1:
        raise argparse.ArgumentTypeError("shot count must be positive")
    return value


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "predict": cmd_predict,
    "validate": cmd_validate,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mqns", description="Multiqubit dephasing spectroscopy runs"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "coefficient and expectation tables for the configured plan",
        "reconstruct": "full spectra reconstruction plus thermometry reports",
        "predict": "phase/fidelity trajectories under reconstructed spectra",
        "validate": "oracle cross-checks; exits nonzero on failure",
    }
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=helps[name])
        cmd.add_argument("--config", required=True, metavar="PATH", help="JSON config file")
        cmd.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
        cmd.add_argument("--seed", type=int, metavar="N", help="rng seed (overrides config)")
        cmd.add_argument("--threads", type=int, metavar="N", help="worker threads")
        cmd.add_argument(
            "--shots", type=_shots_argument, metavar="N|exact", default=UNSET,
            help="shots per expectation, or 'exact' for noiseless data",
        )
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = ExperimentConfig.from_file(
            args.config, out=args.out, seed=args.seed, threads=args.threads, shots=args.shots
        )
        return COMMANDS[args.command](config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
