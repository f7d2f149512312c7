"""Recovery of bath spectra at cycle harmonics from repeated-cycle data.

For a net-identity cycle of duration T repeated M times, the symmetric
filter overlap concentrates on a Fejer comb whose teeth sit at the cycle
harmonics and carry mass M/T each, while the antisymmetric overlap (for
displacement-antisymmetric cycles) forms an alternating comb with mass
1/T and (-1)^k tooth weights built from the half-cycle window.  Sampling
the coefficient integrals on those teeth turns measured cumulant
coefficients into linear equations for the spectra at k * 2*pi/T.

The protocols here assemble those equations for a library of two-qubit
cycle pairs, solve them in stages (symmetric spectra, antisymmetric
cross spectrum, zero-frequency values, antisymmetric self spectra), and
derive the bath temperature and coupling density from the results.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize_scalar

from .bath import coth, inverse_temperature_ps, split_spectrum
from .control import (
    Sequence,
    as_fraction,
    classify_displacement,
    classify_mirror,
    compile_sequence,
    library_sequence,
    merge_timed_ops,
    overlay,
    pi_op,
    product_displacement_sign,
    swap_op,
)
from .dynamics import (
    _CASE_BRACKETS,
    DegenerateMeasurementError,
    invert_expectations,
    predicted_expectations,
    sample_expectations,
    window_coefficients,
)
from .filters import CycleCache, FilterEvaluator, FrequencyGrid, symmetric_nodes
from .indices import observable_sign, single_qubit_masks


class PlanError(ValueError):
    """Raised when a sequence plan cannot support the requested inversion."""


class DegenerateRowError(ValueError):
    """Raised when a comb row carries no usable design weight."""


class RankDeficientError(ValueError):
    """Raised when a design matrix loses rank without regularization."""

    def __init__(self, message, directions=()):
        super().__init__(message)
        self.directions = tuple(directions)


class IllConditionedError(ValueError):
    """Raised when the design condition number exceeds the configured limit."""


# ----------------------------------------------------------------------
# harmonic grid


@dataclass(frozen=True)
class HarmonicGrid:
    """Harmonics k * 2*pi/base_period for k = 0..k_max."""

    base_period: float
    k_max: int = 32

    def __post_init__(self):
        if self.base_period <= 0:
            raise ValueError("base period must be positive")
        if self.k_max < 1:
            raise ValueError("need at least one nonzero harmonic")

    @property
    def omega0(self):
        return 2.0 * np.pi / self.base_period

    def omega(self, k):
        return np.asarray(k, dtype=float) * self.omega0

    @property
    def harmonics(self):
        return np.arange(self.k_max + 1)

    def cycle_harmonic(self, schedule):
        """The integer n with cycle duration = base_period / n."""
        ratio = self.base_period / float(schedule.duration)
        n = int(round(ratio))
        if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
            raise PlanError(
                f"cycle duration {float(schedule.duration)} does not divide "
                f"the base period {self.base_period}"
            )
        return n

    def validate_spacing(self, delta):
        """Check the top harmonic stays below the pi/delta control limit.

        `delta` is the finest pulse gap available anywhere in the plan;
        harmonics beyond pi/delta cannot be reached by any tooth of any
        cycle built from that control.
        """
        limit = np.pi / float(delta)
        top = self.k_max * self.omega0
        if top > limit * (1.0 + 1e-12):
            raise PlanError(
                f"top harmonic {top:.3f} rad/ps exceeds the pi/delta limit "
                f"{limit:.3f} of the finest control spacing {float(delta):.3f} ps"
            )


# ----------------------------------------------------------------------
# unknown layout

_COMPONENTS = ("plus_re", "plus_im", "minus_re", "minus_im")
# components that vanish at zero frequency by the conjugation symmetry
_ODD_AT_ZERO = ("plus_im", "minus_re")


class SpectrumTable:
    """Real unknowns for every bath pair: S+/- split into re/im parts.

    Columns are (pair, component, k) with pair a canonical (low, high)
    mask pair.  Self pairs keep only the real components; components odd
    under w -> -w start at k = 1, the even ones at k = 0.
    """

    def __init__(self, model, grid):
        self.model = model
        self.grid = grid
        singles = single_qubit_masks(model.n_qubits)
        extra = set()
        for a, b in getattr(model, "classical", {}):
            extra.update((a, b))
        if 0 in extra and model.collective:
            raise PlanError(
                "classical noise on the collective label overlaps its "
                "single-qubit expansion; relabel the classical process"
            )
        if 0 in extra:
            extra.discard(0)
            elementary = [0] + sorted(set(singles) | extra)
        else:
            elementary = sorted(set(singles) | extra)
        self.elementary = tuple(elementary)
        pairs = []
        for i, a in enumerate(elementary):
            for b in elementary[i:]:
                if model.has_pair(a, b):
                    pairs.append((a, b))
        self.pairs = tuple(pairs)
        self.columns = []
        for pair in self.pairs:
            comps = ("plus_re", "minus_re") if pair[0] == pair[1] else _COMPONENTS
            for comp in comps:
                k_lo = 1 if comp in _ODD_AT_ZERO else 0
                for k in range(k_lo, grid.k_max + 1):
                    self.columns.append((pair, comp, k))
        self._index = {col: i for i, col in enumerate(self.columns)}
        self._pair_set = set(self.pairs)
        self._decompose_cache = {}

    @property
    def n_columns(self):
        return len(self.columns)

    def col_index(self, pair, comp, k):
        return self._index[(tuple(pair), comp, int(k))]

    def has_column(self, pair, comp, k):
        return (tuple(pair), comp, int(k)) in self._index

    def label(self, idx):
        (a, b), comp, k = self.columns[idx]
        return f"{comp}[{a},{b}]@k{k}"

    def columns_for(self, pairs=None, comps=None, k_min=0, k_max=None):
        out = []
        for i, ((a, b), comp, k) in enumerate(self.columns):
            if pairs is not None and (a, b) not in pairs:
                continue
            if comps is not None and comp not in comps:
                continue
            if k < k_min or (k_max is not None and k > k_max):
                continue
            out.append(i)
        return np.array(out, dtype=int)

    def expand(self, mask):
        """Elementary bath labels summed inside a raw schedule label."""
        if mask == 0 and self.model.collective:
            return tuple(single_qubit_masks(self.model.n_qubits))
        if mask in self.elementary:
            return (mask,)
        return ()

    def decompose(self, a_raw, b_raw, k_signed):
        """S_{a_raw,b_raw}(k*w0) as [(column, coefficient)] over unknowns."""
        key = (a_raw, b_raw, int(k_signed))
        hit = self._decompose_cache.get(key)
        if hit is not None:
            return hit
        k = abs(int(k_signed))
        s = float(np.sign(k_signed))
        acc = {}

        def add(pair, comp, coeff):
            if coeff == 0 or not self.has_column(pair, comp, k):
                return
            idx = self.col_index(pair, comp, k)
            acc[idx] = acc.get(idx, 0.0) + coeff

        for ea in self.expand(a_raw):
            for eb in self.expand(b_raw):
                lo, hi = (ea, eb) if ea <= eb else (eb, ea)
                if (lo, hi) not in self._pair_set:
                    continue
                if lo == hi:
                    add((lo, hi), "plus_re", 0.5)
                    if k:
                        add((lo, hi), "minus_re", 0.5 * s)
                else:
                    flip = ea > eb
                    terms = [("plus_re", 0.5), ("minus_im", 0.5j)]
                    if k:
                        terms += [("plus_im", 0.5j * s), ("minus_re", 0.5 * s)]
                    for comp, coeff in terms:
                        add((lo, hi), comp, np.conj(coeff) if flip else coeff)
        out = tuple(acc.items())
        self._decompose_cache[key] = out
        return out

    def truth_vector(self, model=None):
        """Exact unknown values from a model (oracle for synthetic tests)."""
        model = model or self.model
        out = np.zeros(self.n_columns)
        for i, ((a, b), comp, k) in enumerate(self.columns):
            w = np.array([self.grid.omega(k)])
            s_plus, s_minus = split_spectrum(model, a, b, w)
            val = {
                "plus_re": s_plus.real,
                "plus_im": s_plus.imag,
                "minus_re": s_minus.real,
                "minus_im": s_minus.imag,
            }[comp][0]
            out[i] = val
        return out


# ----------------------------------------------------------------------
# coefficient combinations and sequence plans


@dataclass(frozen=True)
class Combo:
    """A linear combination sum lam * C_{s,c} of window coefficients.

    comb declares which tooth family carries the row ("fejer" for the
    symmetric filter, "alternating" for the antisymmetric one);
    background marks rows whose off-tooth symmetric content must be
    subtracted with interpolated spectra before inversion.
    """

    label: str
    terms: tuple
    comb: str
    background: bool = False


# every Fejer comb carries off-tooth sidelobe content and can take a
# background correction; the alternating sum rows concentrate on their
# teeth well enough that only their symmetric-filter part ever needs one
C_DIAG_1 = Combo("c1_0", ((1.0, 1, 0),), "fejer", background=True)
C_DIAG_2 = Combo("c2_0", ((1.0, 2, 0),), "fejer", background=True)
C_DIAG_BOTH = Combo("c3_0", ((1.0, 3, 0),), "fejer", background=True)
C_CROSS = Combo("c3_3", ((1.0, 3, 3),), "fejer", background=True)
D_MINUS = Combo("d_minus", ((1.0, 1, 3), (-1.0, 2, 3)), "fejer", background=True)
D_PLUS = Combo("d_plus", ((1.0, 1, 3), (1.0, 2, 3)), "alternating")
SELF_1 = Combo("c1_1", ((1.0, 1, 1),), "alternating", background=True)
SELF_2 = Combo("c2_2", ((1.0, 2, 2),), "alternating", background=True)


@dataclass(frozen=True)
class PlanEntry:
    """One repeated cycle with the coefficient combinations read from it."""

    name: str
    schedule: object
    repetitions: int
    combos: tuple


def pair_cycle(name1, name2, duration):
    """Compiled two-qubit cycle from two library sequences run in parallel."""
    duration = as_fraction(duration)
    s1 = library_sequence(name1, duration, qubit=1, n_qubits=2)
    s2 = library_sequence(name2, duration, qubit=2, n_qubits=2)
    return compile_sequence(overlay(s1, s2, name=f"{name1}*{name2}"))


def delta_plus_cycle(duration, flip_qubit=1):
    """Swap-dressed cycle whose C_{1,12}+C_{2,12} sum is alternating-only.

    Each half holds a swap block covering (T/8, T/4); the pi pair on one
    qubit at half and full cycle makes every coupled window pair
    displacement-antisymmetric.  The block must sit off-centre in its
    half: a placement mirror-symmetric about T/4 makes the half-window
    transform products real at the comb teeth, and the tooth weight of
    the self spectra is proportional to their imaginary part.  With two
    qubits the swapped/unswapped windows are complements of each other,
    so the row senses the difference of the two antisymmetric self
    spectra (equal and opposite weights), never their sum.
    """
    duration = as_fraction(duration)
    half = duration / 2
    events = []
    for start in (as_fraction(0), half):
        events += [
            (start + half / 4, [swap_op(1, 2)]),
            (start + half / 2, [swap_op(1, 2)]),
        ]
    events += [(half, [pi_op(flip_qubit)]), (duration, [pi_op(flip_qubit)])]
    seq = Sequence(2, duration, merge_timed_ops(events), name=f"delta_plus{flip_qubit}")
    return compile_sequence(seq)


def delta_minus_cycle(duration, flip_qubit=1):
    """Swap-dressed cycle whose C_{1,12}-C_{2,12} difference is Fejer-only.

    The swaps sit asymmetrically (eighth and half cycle) so the window
    products do not cancel between the exchanged roles; the trailing pi
    pair keeps the cycle net-identity without restoring that symmetry.
    At the comb teeth the row senses only the flipped qubit's own
    antisymmetric spectrum (the other qubit's tooth weights cancel),
    which anchors the per-qubit scale that the difference rows of
    `delta_plus_cycle` cannot fix.  Being a Fejer row it carries
    off-tooth background and needs `background_corrections`.
    """
    duration = as_fraction(duration)
    events = [
        (duration / 8, [swap_op(1, 2)]),
        (duration / 2, [swap_op(1, 2)]),
        (3 * duration / 4, [pi_op(flip_qubit)]),
        (duration, [pi_op(flip_qubit)]),
    ]
    seq = Sequence(2, duration, merge_timed_ops(events), name=f"delta_minus{flip_qubit}")
    return compile_sequence(seq)


def default_repetitions(n):
    """Repetition counts growing with the harmonic index of the cycle."""
    if n == 1:
        return 7
    if n <= 3:
        return 15
    return 20


def build_plan(
    grid,
    include_swap=True,
    repetitions=None,
    dc_harmonic=16,
    dc_repetitions=35,
):
    """Measurement plan covering every harmonic of `grid`.

    Per harmonic n the stage families are: cpmg*cpmg (diagonal rows, the
    Fejer difference row, and the two self alternating rows), cdd3*cpmg
    and cpmg*cdd3 (diagonal rows with reshaped qubit-1/qubit-2 windows,
    plus one cross row), cdd3*cdd1 (cross row), cdd1x2*cdd1 (alternating
    sum row).  An uneven-spacing family at `dc_harmonic` keeps a nonzero
    zero-frequency filter value for the dc solve, and swap-dressed delta
    cycles (when `include_swap`) reach the antisymmetric self spectra.
    """
    reps = repetitions or default_repetitions
    base = as_fraction(grid.base_period)
    plan = []
    for n in range(1, grid.k_max + 1):
        t_c = base / n
        m = reps(n)
        plan.append(
            PlanEntry(
                f"cpmg_cpmg_n{n}",
                pair_cycle("cpmg", "cpmg", t_c),
                m,
                (C_DIAG_1, C_DIAG_2, C_DIAG_BOTH, D_MINUS, SELF_1, SELF_2),
            )
        )
        plan.append(
            PlanEntry(
                f"cdd3_cpmg_n{n}",
                pair_cycle("cdd3", "cpmg", t_c),
                m,
                (C_DIAG_BOTH, C_CROSS),
            )
        )
        plan.append(
            PlanEntry(
                f"cpmg_cdd3_n{n}",
                pair_cycle("cpmg", "cdd3", t_c),
                m,
                (C_DIAG_BOTH,),
            )
        )
        plan.append(
            PlanEntry(
                f"cdd3_cdd1_n{n}",
                pair_cycle("cdd3", "cdd1", t_c),
                m,
                (C_CROSS,),
            )
        )
        plan.append(
            PlanEntry(
                f"cdd1x2_cdd1_n{n}",
                pair_cycle("cdd1x2", "cdd1", t_c),
                m,
                (D_PLUS,),
            )
        )
    if dc_harmonic is not None:
        if dc_harmonic > grid.k_max:
            raise PlanError("dc harmonic outside the grid")
        t_dc = base / dc_harmonic
        plan.append(
            PlanEntry(
                f"dc_uneven_uneven_n{dc_harmonic}",
                pair_cycle("uneven_cdd1", "uneven_cdd1", t_dc),
                dc_repetitions,
                (C_CROSS, D_MINUS),
            )
        )
        plan.append(
            PlanEntry(
                f"dc_uneven_cpmg_n{dc_harmonic}",
                pair_cycle("uneven_cdd1", "cpmg", t_dc),
                dc_repetitions,
                (C_DIAG_BOTH,),
            )
        )
        plan.append(
            PlanEntry(
                f"dc_cpmg_uneven_n{dc_harmonic}",
                pair_cycle("cpmg", "uneven_cdd1", t_dc),
                dc_repetitions,
                (C_DIAG_BOTH,),
            )
        )
    if include_swap:
        for n in range(1, grid.k_max + 1):
            t_c = base / n
            m = reps(n)
            for q in (1, 2):
                plan.append(
                    PlanEntry(
                        f"delta_plus_pi{q}_n{n}",
                        delta_plus_cycle(t_c, flip_qubit=q),
                        m,
                        (D_PLUS,),
                    )
                )
                plan.append(
                    PlanEntry(
                        f"delta_minus_pi{q}_n{n}",
                        delta_minus_cycle(t_c, flip_qubit=q),
                        m,
                        (D_MINUS,),
                    )
                )
    return plan


def net_brackets(schedule, model, combo):
    """Net (k+, k-) bracket weights per ordered window pair for a combo."""
    pairs = schedule.support_pairs()
    net = {}
    for lam, s, c in combo.terms:
        for pair_a in pairs:
            fa = observable_sign(s, pair_a[0])
            for pair_b in pairs:
                fb = observable_sign(s, pair_b[0])
                if fa > 0 and fb > 0:
                    continue
                if pair_a[0] ^ pair_b[0] != c:
                    continue
                if not model.has_pair(pair_a[1], pair_b[1]):
                    continue
                kp, km = _CASE_BRACKETS[(fa, fb)]
                old = net.get((pair_a, pair_b), (0.0, 0.0))
                net[(pair_a, pair_b)] = (old[0] + lam * kp, old[1] + lam * km)
    return {key: val for key, val in net.items() if val != (0.0, 0.0)}


def validate_plan(plan, model, grid):
    """Reject plans whose declared comb kinds contradict the schedules."""
    names = set()
    finest = np.inf
    for entry in plan:
        if entry.name in names:
            raise PlanError(f"duplicate plan entry name {entry.name!r}")
        names.add(entry.name)
        if not entry.schedule.is_net_identity:
            raise PlanError(f"cycle {entry.name!r} is not net identity")
        if entry.repetitions < 1:
            raise PlanError(f"cycle {entry.name!r} needs a positive repetition count")
        grid.cycle_harmonic(entry.schedule)
        gaps = np.diff(entry.schedule.segment_bounds_float())
        finest = min(finest, float(np.min(gaps)))
        for combo in entry.combos:
            net = net_brackets(entry.schedule, model, combo)
            if not net:
                continue  # inert for this model; protocols skip such routes
            has_kp = any(kp != 0.0 for kp, _ in net.values())
            has_km = any(km != 0.0 for _, km in net.values())
            if combo.comb == "fejer" and has_km:
                raise PlanError(
                    f"{entry.name!r}/{combo.label}: declared symmetric-comb row "
                    "carries antisymmetric bracket weight"
                )
            if combo.comb == "alternating":
                if not has_km:
                    raise PlanError(
                        f"{entry.name!r}/{combo.label}: declared alternating row "
                        "has no antisymmetric bracket weight"
                    )
                for (pair_a, pair_b), (_, km) in net.items():
                    if km == 0.0:
                        continue
                    if product_displacement_sign(entry.schedule, pair_a, pair_b) is None:
                        raise PlanError(
                            f"{entry.name!r}/{combo.label}: windows {pair_a},{pair_b} "
                            "are not displacement-antisymmetric"
                        )
    if np.isfinite(finest):
        grid.validate_spacing(finest)


# ----------------------------------------------------------------------
# comb rows


def cycle_filter_values(schedule, pair, omegas):
    """Single-cycle F1 for one window pair at signed frequencies.

    The cycle cache wants a symmetric node array, so values are computed
    on the signed closure and looked up; the zero-frequency value is the
    signed area of the window, which the transform cache cannot produce.
    """
    omegas = np.asarray(omegas, dtype=float)
    out = np.zeros(omegas.shape, dtype=complex)
    nonzero = np.abs(omegas) > 1e-12
    if np.any(nonzero):
        nodes = symmetric_nodes(np.unique(np.abs(omegas[nonzero])))
        values = CycleCache(schedule, nodes).f1(pair)
        lookup = {round(w, 10): v for w, v in zip(nodes, values)}
        out[nonzero] = [lookup[round(w, 10)] for w in omegas[nonzero]]
    if np.any(~nonzero):
        widths = np.diff(schedule.segment_bounds_float())
        out[~nonzero] = float(np.dot(schedule.entry_signs(*pair), widths))
    return out


def comb_row(schedule, model, repetitions, combo, grid, table):
    """One design row: tooth weights of a coefficient combo over unknowns.

    Returns (row, meta) with `row` complex over `table` columns.  Window
    pairs whose symmetric teeth all vanish are dropped from the design
    (their content is off-tooth and belongs to a background correction);
    a row with no weight anywhere raises DegenerateRowError.
    """
    t_c = float(schedule.duration)
    n = grid.cycle_harmonic(schedule)
    m = repetitions
    net = net_brackets(schedule, model, combo)
    if not net:
        raise DegenerateRowError(
            f"combo {combo.label!r} couples nothing on {schedule.name!r} for this model"
        )
    j_max = grid.k_max // n
    js = np.arange(-j_max, j_max + 1)
    k_teeth = js * n
    w_teeth = k_teeth * grid.omega0
    half = schedule.truncated(as_fraction(schedule.duration) / 2)
    row = np.zeros(table.n_columns, dtype=complex)
    dropped = []

    def distribute(pair_a, pair_b, teeth):
        for i, k in enumerate(k_teeth):
            if teeth[i] == 0.0:
                continue
            for col, coeff in table.decompose(pair_a[1], pair_b[1], k):
                row[col] += teeth[i] * coeff

    for (pair_a, pair_b), (kp, km) in net.items():
        if kp:
            va = cycle_filter_values(schedule, pair_a, -w_teeth)
            vb = cycle_filter_values(schedule, pair_b, w_teeth)
            prod = va * vb
            if np.max(np.abs(prod)) < 1e-10 * t_c**2:
                dropped.append((pair_a, pair_b, "fejer"))
            else:
                distribute(pair_a, pair_b, (m / t_c) * kp * prod)
        if km:
            sign = product_displacement_sign(schedule, pair_a, pair_b)
            if sign is None:
                raise ValueError(
                    f"windows {pair_a},{pair_b} of {schedule.name!r} are not "
                    "displacement-antisymmetric; the alternating comb is undefined"
                )
            pa = cycle_filter_values(half, pair_a, -w_teeth)
            pb = cycle_filter_values(half, pair_b, w_teeth)
            prod = pa * pb
            if np.max(np.abs(prod)) < 1e-10 * t_c**2:
                dropped.append((pair_a, pair_b, "alternating"))
            else:
                distribute(pair_a, pair_b, (1.0 / t_c) * km * sign * (-1.0) ** js * prod)
    if not np.any(row):
        raise DegenerateRowError(
            f"combo {combo.label!r} on {schedule.name!r} leaves no design weight "
            "(all teeth vanish); the plan cannot constrain anything with it"
        )
    meta = {
        "cycle": schedule.name,
        "harmonic": n,
        "repetitions": m,
        "label": combo.label,
        "comb": combo.comb,
        "dropped": tuple(dropped),
    }
    return row, meta


# ----------------------------------------------------------------------
# measurement


def measure_plan(plan, model, omega_max=None, shots=None, rng=None, coefficient_map=None):
    """Coefficient data for a plan, keyed (entry name, combo label).

    With `shots` set, the exact coefficients are pushed through the ten
    tomography expectations, binomially sampled, and inverted back, so
    the data carry realistic shot noise instead of being exact.
    `coefficient_map` (entry name -> class coefficients) supplies
    precomputed exact values; sampling still walks the plan in order, so
    results match the unmapped path bit for bit.
    """
    if shots is not None and rng is None:
        raise ValueError("shot sampling needs an explicit rng")
    data = {}
    for entry in plan:
        if coefficient_map is not None:
            coeffs = coefficient_map[entry.name]
        else:
            coeffs = window_coefficients(
                entry.schedule, model, repetitions=entry.repetitions, omega_max=omega_max
            )
        if shots is not None:
            expect = predicted_expectations(coeffs)
            sampled = sample_expectations(expect, shots, rng)
            try:
                coeffs = invert_expectations(sampled)
            except DegenerateMeasurementError as err:
                raise DegenerateMeasurementError(
                    f"{entry.name}: {err}; the decayed signal needs more shots"
                ) from err
        for combo in entry.combos:
            value = 0.0 + 0.0j
            for lam, s, c in combo.terms:
                value += lam * complex(coeffs[s].get(c, 0.0))
            data[(entry.name, combo.label)] = value
    return data


# ----------------------------------------------------------------------
# linear systems


@dataclass
class LinearSystem:
    """Realified design rows over a subset of spectrum-table columns."""

    matrix: np.ndarray
    rhs: np.ndarray
    meta: list
    columns: np.ndarray
    table: SpectrumTable

    @property
    def shape(self):
        return self.matrix.shape


def complex_rows(
    plan, model, grid, table, data, labels, entry_filter=None, corrections=None
):
    """[(key, row, value, meta)] for every requested (entry, combo)."""
    out = []
    for entry in plan:
        if entry_filter is not None and not entry_filter(entry):
            continue
        for combo in entry.combos:
            if combo.label not in labels:
                continue
            key = (entry.name, combo.label)
            row, meta = comb_row(
                entry.schedule, model, entry.repetitions, combo, grid, table
            )
            value = complex(data[key])
            if corrections:
                value -= corrections.get(key, 0.0)
            out.append((key, row, value, meta))
    return out


def realize_system(rows, table, columns, known=None, leak_tol=1e-8, drop_tol=1e-11):
    """Stack complex rows into a real system over the active columns.

    `known` maps column indices to already-estimated values; their
    contribution moves to the right-hand side.  Weight on a column that
    is neither active nor known is a design error and raises PlanError.
    Real rows with negligible norm are dropped (an all-real row, for
    instance, contributes no imaginary equation).
    """
    columns = np.asarray(columns, dtype=int)
    active = set(int(c) for c in columns)
    known = known or {}
    mat, rhs, meta = [], [], []
    for key, row, value, rmeta in rows:
        scale = float(np.max(np.abs(row)))
        shifted = value
        for col, val in known.items():
            if row[col] != 0.0:
                shifted -= row[col] * val
        leak = [
            i
            for i in np.flatnonzero(np.abs(row) > leak_tol * scale)
            if i not in active and i not in known
        ]
        if leak:
            names = ", ".join(table.label(i) for i in leak[:4])
            raise PlanError(
                f"row {key} carries weight on columns outside the active and "
                f"known sets ({names}); earlier stage estimates may be missing"
            )
        sub = row[columns]
        for part, take in (("re", np.real), ("im", np.imag)):
            mat.append(take(sub))
            rhs.append(take(shifted))
            meta.append({**rmeta, "key": key, "part": part})
    if not mat:
        raise PlanError("no design rows matched the request")
    mat = np.array(mat, dtype=float)
    rhs = np.array(rhs, dtype=float)
    norms = np.linalg.norm(mat, axis=1)
    keep = norms > drop_tol * float(np.max(norms))
    return LinearSystem(mat[keep], rhs[keep], [m for m, k in zip(meta, keep) if k], columns, table)


def build_system(
    plan,
    model,
    grid,
    table,
    data,
    labels,
    columns,
    known=None,
    entry_filter=None,
    corrections=None,
):
    rows = complex_rows(plan, model, grid, table, data, labels, entry_filter, corrections)
    return realize_system(rows, table, columns, known=known)


@dataclass
class SolveResult:
    """Least-squares estimate with the conditioning diagnostics kept."""

    columns: np.ndarray
    x: np.ndarray
    condition: float
    rank: int
    residual: float
    sensitivity: np.ndarray
    singular_values: np.ndarray
    regularization: str = "none"

    def as_dict(self):
        return {int(c): float(v) for c, v in zip(self.columns, self.x)}


def solve_system(
    system,
    regularization="none",
    reg_param=None,
    cond_limit=1e3,
    rcond=1e-10,
):
    """Row-normalized least squares over the system's active columns.

    regularization: "none" (error on rank loss or conditioning past
    `cond_limit`), "truncated_svd" (drop singular values below
    reg_param * s_max), or "ridge" (Tikhonov with weight reg_param).
    """
    mat, rhs = system.matrix, system.rhs
    n_rows, n_cols = mat.shape
    if n_rows < n_cols:
        raise PlanError(
            f"{n_rows} usable rows cannot determine {n_cols} unknowns; "
            "extend the plan before solving"
        )
    norms = np.linalg.norm(mat, axis=1)
    mat_n = mat / norms[:, None]
    rhs_n = rhs / norms
    u, s, vt = np.linalg.svd(mat_n, full_matrices=False)
    condition = float(s[0] / s[-1]) if s[-1] > 0 else np.inf
    rank = int(np.sum(s > rcond * s[0]))
    if regularization == "none":
        if rank < n_cols:
            directions = []
            for null_row in vt[rank:]:
                order = np.argsort(-np.abs(null_row))[:3]
                directions.append(
                    tuple(system.table.label(system.columns[i]) for i in order)
                )
            raise RankDeficientError(
                f"design rank {rank} < {n_cols} unknowns; null directions "
                f"dominated by {directions}",
                directions=directions,
            )
        if cond_limit is not None and condition > cond_limit:
            raise IllConditionedError(
                f"design condition {condition:.3e} exceeds the {cond_limit:.3e} "
                "limit; regularize or rebalance the plan"
            )
        inv_s = 1.0 / s
    elif regularization == "truncated_svd":
        tau = 1e-8 if reg_param is None else float(reg_param)
        inv_s = np.where(s >= tau * s[0], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    elif regularization == "ridge":
        if reg_param is None:
            raise ValueError("ridge regularization needs reg_param")
        inv_s = s / (s**2 + float(reg_param) ** 2)
    else:
        raise ValueError(f"unknown regularization {regularization!r}")
    x = vt.T @ (inv_s * (u.T @ rhs_n))
    residual = float(np.linalg.norm(mat_n @ x - rhs_n))
    sensitivity = np.sqrt(np.sum((vt.T * inv_s[None, :]) ** 2, axis=1))
    return SolveResult(
        columns=system.columns,
        x=x,
        condition=condition,
        rank=rank,
        residual=residual,
        sensitivity=sensitivity,
        singular_values=s,
        regularization=regularization,
    )


# ----------------------------------------------------------------------
# estimates


class SpectrumEstimates:
    """Accumulated unknown values across protocol stages (NaN = unset)."""

    def __init__(self, table):
        self.table = table
        self.values = np.full(table.n_columns, np.nan)

    def copy(self):
        out = SpectrumEstimates(self.table)
        out.values = self.values.copy()
        return out

    def update(self, columns, x):
        self.values[np.asarray(columns, dtype=int)] = x

    def update_result(self, result):
        self.update(result.columns, result.x)

    def known_dict(self, exclude=()):
        skip = set(int(c) for c in exclude)
        return {
            i: float(v)
            for i, v in enumerate(self.values)
            if np.isfinite(v) and i not in skip
        }

    def value(self, pair, comp, k):
        pair = tuple(pair)
        if self.table.has_column(pair, comp, k):
            return float(self.values[self.table.col_index(pair, comp, k)])
        if k == 0:
            return 0.0  # odd components and self imaginary parts vanish there
        raise KeyError((pair, comp, k))

    def component(self, pair, comp):
        """Values over k = 0..k_max, with structural zeros filled in."""
        pair = tuple(pair)
        out = np.zeros(self.table.grid.k_max + 1)
        for k in range(self.table.grid.k_max + 1):
            if self.table.has_column(pair, comp, k):
                out[k] = self.values[self.table.col_index(pair, comp, k)]
        return out


# ----------------------------------------------------------------------
# interpolation


def component_interpolant(grid, samples, parity):
    """Cubic spline through harmonic samples with a Gaussian far tail.

    `samples` holds k = 0..k_max values of one real spectrum component;
    `parity` ("even" or "odd") fixes the signed extension.  Beyond the
    last harmonic the value decays as exp(-(w^2 - w_edge^2)/width^2) with
    the width fitted to the last two samples (monotone by construction).
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size != grid.k_max + 1:
        raise ValueError("need one sample per harmonic including k = 0")
    if not np.all(np.isfinite(samples)):
        raise ValueError("harmonic samples must be finite")
    if samples.size < 4:
        raise ValueError("need at least 4 harmonic samples to interpolate")
    if parity not in ("even", "odd"):
        raise ValueError("parity must be 'even' or 'odd'")
    sign = 1.0 if parity == "even" else -1.0
    vals = samples.copy()
    if parity == "odd":
        vals[0] = 0.0
    ks = np.arange(-grid.k_max, grid.k_max + 1)
    signed = np.concatenate((sign * vals[:0:-1], vals))
    spline = CubicSpline(ks * grid.omega0, signed)
    w_edge = grid.k_max * grid.omega0
    edge = vals[-1]
    prev = vals[-2]
    if abs(edge) > 0 and abs(prev) > abs(edge):
        width2 = (w_edge**2 - (w_edge - grid.omega0) ** 2) / np.log(abs(prev) / abs(edge))
    else:
        width2 = w_edge**2

    def evaluate(w):
        w = np.asarray(w, dtype=float)
        out = np.empty(w.shape)
        inside = np.abs(w) <= w_edge
        out[inside] = spline(w[inside])
        far = ~inside
        if np.any(far):
            tail = edge * np.exp(-(w[far] ** 2 - w_edge**2) / width2)
            out[far] = np.where(w[far] > 0, tail, sign * tail)
        return out

    return evaluate


def pair_interpolant(grid, estimates, pair, fill=0.0, include_minus=True):
    """Complex S_ab(w) interpolant for one canonical pair of estimates.

    Unset components are replaced by `fill`; the parity of each real
    component is enforced exactly, so the result obeys the conjugation
    symmetries whatever the sample noise.  `include_minus=False` keeps
    only the symmetric half (the classical content of the pair).
    """
    pair = tuple(pair)

    def comp(name):
        vals = estimates.component(pair, name)
        return np.where(np.isfinite(vals), vals, fill)

    re_p = component_interpolant(grid, comp("plus_re"), "even")
    re_m = component_interpolant(grid, comp("minus_re"), "odd") if include_minus else None
    if pair[0] == pair[1]:
        im_p = im_m = None
    else:
        im_p = component_interpolant(grid, comp("plus_im"), "odd")
        im_m = component_interpolant(grid, comp("minus_im"), "even") if include_minus else None

    def evaluate(w):
        w = np.asarray(w, dtype=float)
        plus = re_p(w) + (1j * im_p(w) if im_p else 0.0)
        if re_m is None:
            return 0.5 * plus
        minus = re_m(w) + (1j * im_m(w) if im_m else 0.0)
        return 0.5 * (plus + minus)

    return evaluate


def raw_spectrum_interpolant(table, grid, estimates, fill=0.0):
    """Callable S(a_raw, b_raw, w) built from the pair interpolants.

    Raw schedule labels expand into elementary pairs; reversed pairs use
    the pointwise conjugate, matching the hermitian cross-spectrum.
    """
    cache = {}

    def pair_fn(lo, hi):
        if (lo, hi) not in cache:
            cache[(lo, hi)] = pair_interpolant(grid, estimates, (lo, hi), fill=fill)
        return cache[(lo, hi)]

    def evaluate(a_raw, b_raw, w):
        w = np.asarray(w, dtype=float)
        out = np.zeros(w.shape, dtype=complex)
        for ea in table.expand(a_raw):
            for eb in table.expand(b_raw):
                lo, hi = (ea, eb) if ea <= eb else (eb, ea)
                if (lo, hi) not in table._pair_set:
                    continue
                vals = pair_fn(lo, hi)(w)
                out += np.conj(vals) if ea > eb else vals
        return out

    return evaluate


PREDICTION_SUBSETS = ("full", "no_self_minus", "classical")


class ReconstructedBath:
    """Dynamics-compatible bath backed by the interpolated estimates.

    Exposes the `has_pair`/`cross_spectrum` interface of the physical
    model, so the cumulant engine can predict dynamics from reconstructed
    spectra alone.  `subset` selects how much of the reconstruction to
    keep: "full" uses every estimated component, "no_self_minus" drops
    the per-qubit antisymmetric spectra, and "classical" keeps only the
    symmetric content of every pair.
    """

    def __init__(self, table, grid, estimates, subset="full", fill=0.0):
        if subset not in PREDICTION_SUBSETS:
            raise ValueError(f"unknown prediction subset {subset!r}")
        self.table = table
        self.grid = grid
        self.subset = subset
        self.n_qubits = table.model.n_qubits
        self._pair_fns = {}
        for pair in table.pairs:
            keep_minus = subset == "full" or (
                subset == "no_self_minus" and pair[0] != pair[1]
            )
            self._pair_fns[pair] = pair_interpolant(
                grid, estimates, pair, fill=fill, include_minus=keep_minus
            )

    def has_pair(self, a, b):
        for ea in self.table.expand(a):
            for eb in self.table.expand(b):
                lo, hi = (ea, eb) if ea <= eb else (eb, ea)
                if (lo, hi) in self.table._pair_set:
                    return True
        return False

    def cross_spectrum(self, a, b, omega):
        w = np.asarray(omega, dtype=float)
        out = np.zeros(w.shape, dtype=complex)
        for ea in self.table.expand(a):
            for eb in self.table.expand(b):
                lo, hi = (ea, eb) if ea <= eb else (eb, ea)
                if (lo, hi) not in self.table._pair_set:
                    continue
                vals = self._pair_fns[(lo, hi)](w)
                out += np.conj(vals) if ea > eb else vals
        return out


def background_corrections(
    plan, model, grid, table, estimates, labels=None, entry_filter=None, omega_max=None
):
    """Off-tooth symmetric-filter content of background-flagged combos.

    For every net k+ bracket of a flagged combo the correction is the
    full symmetric-filter integral minus its own tooth sum, both taken
    over the interpolated spectra, so subtracting it from the measured
    value leaves exactly what the tooth design matrix models.
    """
    spec = raw_spectrum_interpolant(table, grid, estimates)
    w_max = omega_max if omega_max is not None else 3.0 * grid.omega(grid.k_max)
    out = {}
    for entry in plan:
        if entry_filter is not None and not entry_filter(entry):
            continue
        for combo in entry.combos:
            if not combo.background:
                continue
            if labels is not None and combo.label not in labels:
                continue
            net = net_brackets(entry.schedule, model, combo)
            if not net:
                continue
            t_c = float(entry.schedule.duration)
            n = grid.cycle_harmonic(entry.schedule)
            m = entry.repetitions
            fine = FrequencyGrid(w_max, m * t_c)
            evaluator = FilterEvaluator(
                CycleCache(entry.schedule, fine.nodes), repetitions=m
            )
            j_max = grid.k_max // n
            w_teeth = np.arange(-j_max, j_max + 1) * n * grid.omega0
            total = 0.0 + 0.0j
            for (pair_a, pair_b), (kp, _) in net.items():
                if not kp:
                    continue
                s_fine = spec(pair_a[1], pair_b[1], fine.nodes)
                g_plus = evaluator.g_plus(pair_a, pair_b)[::-1]
                quad = np.sum(s_fine * fine.weights * kp * g_plus) / (2.0 * np.pi)
                va = cycle_filter_values(entry.schedule, pair_a, -w_teeth)
                vb = cycle_filter_values(entry.schedule, pair_b, w_teeth)
                s_teeth = spec(pair_a[1], pair_b[1], w_teeth)
                teeth = np.sum((m / t_c) * kp * va * vb * s_teeth)
                total += quad - teeth
            out[(entry.name, combo.label)] = total
    return out


# ----------------------------------------------------------------------
# protocol stages


@dataclass
class StepResult:
    """Estimates contributed by one protocol stage plus its diagnostics."""

    values: dict
    solves: dict = field(default_factory=dict)
    note: str = ""


def _stage_entries(entry):
    return not entry.name.startswith(("dc_", "delta_"))


def _dc_entries(entry):
    return entry.name.startswith("dc_")


def _delta_entries(entry):
    return entry.name.startswith("delta_")


def _cross_pairs(table):
    return [pair for pair in table.pairs if pair[0] != pair[1]]


def _self_pairs(table):
    return [pair for pair in table.pairs if pair[0] == pair[1]]


def protocol_diagonal_step1(
    data,
    plan,
    model,
    grid,
    table,
    mode="joint",
    corrections=None,
    regularization="none",
    reg_param=None,
    cond_limit=1e3,
):
    """Symmetric spectra at nonzero harmonics from the Fejer-comb rows.

    mode "joint" inverts every diagonal and cross row together; mode
    "differenced" reproduces the sequential route, cancelling one self
    spectrum at a time by subtracting rows that share a qubit window
    before solving square blocks.  Both agree on synthetic data.
    `corrections` (from `background_corrections` once interpolants
    exist) removes the off-tooth sidelobe content of the Fejer rows.
    """
    columns = table.columns_for(comps=("plus_re", "plus_im"), k_min=1)
    labels = {"c1_0", "c2_0", "c3_0", "c3_3"}
    if mode == "joint":
        system = build_system(
            plan, model, grid, table, data, labels, columns,
            entry_filter=_stage_entries, corrections=corrections,
        )
        result = solve_system(
            system, regularization=regularization, reg_param=reg_param, cond_limit=cond_limit
        )
        return StepResult(result.as_dict(), {"joint": result})
    if mode != "differenced":
        raise ValueError(f"unknown mode {mode!r}")
    rows = {
        (key[0], key[1]): (key, row, value, meta)
        for key, row, value, meta in complex_rows(
            data=data,
            plan=plan,
            model=model,
            grid=grid,
            table=table,
            labels={"c3_0", "c3_3"},
            entry_filter=_stage_entries,
            corrections=corrections,
        )
    }
    solves = {}
    values = {}
    for block, keep_pair, base_name, sub_name in (
        ("s11", (1, 1), "cpmg_cpmg_n{n}", "cdd3_cpmg_n{n}"),
        ("s22", (2, 2), "cpmg_cpmg_n{n}", "cpmg_cdd3_n{n}"),
    ):
        diff_rows = []
        for n in range(1, grid.k_max + 1):
            try:
                k_base, r_base, v_base, m_base = rows[(base_name.format(n=n), "c3_0")]
                k_sub, r_sub, v_sub, _ = rows[(sub_name.format(n=n), "c3_0")]
            except KeyError as err:
                raise PlanError(
                    f"differenced mode needs the paired diagonal rows at n={n}"
                ) from err
            diff_rows.append(
                (
                    (f"{k_base[0]}-{k_sub[0]}", "c3_0"),
                    r_base - r_sub,
                    v_base - v_sub,
                    {**m_base, "differenced": True},
                )
            )
        block_cols = table.columns_for(pairs=[keep_pair], comps=("plus_re",), k_min=1)
        system = realize_system(diff_rows, table, block_cols)
        solves[block] = solve_system(
            system, regularization=regularization, reg_param=reg_param, cond_limit=cond_limit
        )
        values.update(solves[block].as_dict())
    cross_rows = [item for key, item in rows.items() if key[1] == "c3_3"]
    cross_cols = table.columns_for(
        pairs=_cross_pairs(table), comps=("plus_re", "plus_im"), k_min=1
    )
    system = realize_system(cross_rows, table, cross_cols)
    solves["cross"] = solve_system(
        system, regularization=regularization, reg_param=reg_param, cond_limit=cond_limit
    )
    values.update(solves["cross"].as_dict())
    return StepResult(values, solves)


def protocol_diagonal_step2(
    data,
    plan,
    model,
    grid,
    table,
    estimates,
    corrections=None,
    regularization="none",
    reg_param=None,
    cond_limit=1e3,
):
    """Antisymmetric cross spectrum at nonzero harmonics.

    Uses the Fejer difference rows (which only the antisymmetric cross
    parts survive) together with the alternating sum rows; symmetric
    values estimated in the previous stage enter as knowns, and
    `corrections` removes the difference rows' off-tooth content.
    """
    columns = table.columns_for(
        pairs=_cross_pairs(table), comps=("minus_re", "minus_im"), k_min=1
    )
    if columns.size == 0:
        raise PlanError("the model has no cross pair to reconstruct")
    known = estimates.known_dict(exclude=columns)
    system = build_system(
        plan,
        model,
        grid,
        table,
        data,
        {"d_minus", "d_plus"},
        columns,
        known=known,
        entry_filter=_stage_entries,
        corrections=corrections,
    )
    result = solve_system(
        system, regularization=regularization, reg_param=reg_param, cond_limit=cond_limit
    )
    return StepResult(result.as_dict(), {"cross_minus": result})


def dc_reconstruct(
    data,
    plan,
    model,
    grid,
    table,
    estimates,
    omega_max=None,
    regularization="none",
    reg_param=None,
    cond_limit=1e3,
):
    """Zero-frequency values of the even spectrum components.

    Needs the uneven-spacing entries, whose cycle filter keeps a nonzero
    zero-frequency value; all nonzero harmonics enter as knowns, and the
    difference row gets its off-tooth content subtracted first.  The odd
    components carry no k = 0 unknowns and stay exactly zero.
    """
    if not any(_dc_entries(entry) for entry in plan):
        raise PlanError("plan has no uneven-spacing entries for the dc solve")
    columns = table.columns_for(comps=("plus_re", "minus_im"), k_min=0, k_max=0)
    known = estimates.known_dict(exclude=columns)
    needed = table.columns_for(comps=("plus_re", "plus_im"), k_min=1)
    missing = [int(c) for c in needed if int(c) not in known]
    if missing:
        raise PlanError(
            "dc solve depends on the nonzero-harmonic estimates; run the "
            f"harmonic stages first (missing e.g. {table.label(missing[0])})"
        )
    corrections = background_corrections(
        plan,
        model,
        grid,
        table,
        estimates,
        labels={"c3_0", "c3_3", "d_minus"},
        entry_filter=_dc_entries,
        omega_max=omega_max,
    )
    system = build_system(
        plan,
        model,
        grid,
        table,
        data,
        {"c3_0", "c3_3", "d_minus"},
        columns,
        known=known,
        entry_filter=_dc_entries,
        corrections=corrections,
    )
    result = solve_system(
        system, regularization=regularization, reg_param=reg_param, cond_limit=cond_limit
    )
    return StepResult(
        result.as_dict(),
        {"dc": result},
        note="odd spectrum components at zero frequency are structural zeros",
    )


def protocol_step3_m2_self(
    data,
    plan,
    model,
    grid,
    table,
    estimates,
    omega_max=None,
    regularization="none",
    reg_param=None,
    cond_limit=1e3,
):
    """Antisymmetric self spectra from the self alternating rows.

    Works when a collective bath label pairs each qubit window with the
    free window; without one those coefficients vanish identically and
    the stage reports that instead of estimating.  The self rows keep
    their alternating teeth (the symmetric teeth vanish for the mirror-
    antisymmetric half-cycles required here) and subtract the symmetric
    off-tooth background using the earlier-stage interpolants.
    """
    if not model.collective:
        return StepResult(
            {},
            {},
            note=(
                "no collective bath label: the self coefficients vanish "
                "identically and this route yields no estimate"
            ),
        )
    for entry in plan:
        if not _stage_entries(entry):
            continue
        for combo in entry.combos:
            if combo.label not in ("c1_1", "c2_2"):
                continue
            sched = entry.schedule
            half = sched.truncated(as_fraction(sched.duration) / 2)
            qubit = 1 if combo.label == "c1_1" else 2
            if (
                classify_mirror(half, qubit, qubit) != -1
                or classify_displacement(sched, qubit, qubit) != -1
                or classify_mirror(half, 0, 0) != 1
            ):
                raise PlanError(
                    f"{entry.name!r} lacks the half-cycle mirror antisymmetry "
                    f"needed for the self row {combo.label}"
                )
    corrections = background_corrections(
        plan,
        model,
        grid,
        table,
        estimates,
        labels={"c1_1", "c2_2"},
        entry_filter=_stage_entries,
        omega_max=omega_max,
    )
    solves = {}
    values = {}
    for label, qubit in (("c1_1", 1), ("c2_2", 2)):
        columns = table.columns_for(
            pairs=[(qubit, qubit)], comps=("minus_re",), k_min=1
        )
        known = estimates.known_dict(exclude=columns)
        system = build_system(
            plan,
            model,
            grid,
            table,
            data,
            {label},
            columns,
            known=known,
            entry_filter=_stage_entries,
            corrections=corrections,
        )
        solves[label] = solve_system(
            system, regularization=regularization, reg_param=reg_param, cond_limit=cond_limit
        )
        values.update(solves[label].as_dict())
    return StepResult(values, solves)


def protocol_nondiagonal_self(
    data,
    plan,
    model,
    grid,
    table,
    estimates,
    omega_max=None,
    refine=True,
    regularization="none",
    reg_param=None,
    cond_limit=1e3,
):
    """Antisymmetric self spectra via the swap-dressed delta cycles.

    The alternating-sum rows of the delta-plus cycles weight the two
    self spectra equally and oppositely, so alone they only fix the
    difference; the Fejer rows of the delta-minus cycles sense one
    qubit each and anchor the scale.  Both families are solved jointly.
    The Fejer rows carry off-tooth background, removed with
    `background_corrections`: the first pass interpolates the unknown
    self columns as zero (the cross and symmetric content, already
    estimated, dominates the background), and when `refine` is set the
    corrections are recomputed from the first-pass estimates and the
    system solved once more.
    """
    if not any(_delta_entries(entry) for entry in plan):
        raise PlanError(
            "plan has no swap-dressed cycles; the antisymmetric self spectra "
            "are unreachable without exchanging qubit roles"
        )
    columns = table.columns_for(pairs=_self_pairs(table), comps=("minus_re",), k_min=1)
    known = estimates.known_dict(exclude=columns)

    def plus_entries(entry):
        return entry.name.startswith("delta_plus")

    def minus_entries(entry):
        return entry.name.startswith("delta_minus")

    plus_rows = complex_rows(
        plan, model, grid, table, data, {"d_plus"}, entry_filter=plus_entries
    )

    def minus_rows(reference):
        corrections = background_corrections(
            plan,
            model,
            grid,
            table,
            reference,
            labels={"d_minus"},
            entry_filter=minus_entries,
            omega_max=omega_max,
        )
        return complex_rows(
            plan, model, grid, table, data, {"d_minus"},
            entry_filter=minus_entries, corrections=corrections,
        )

    system = realize_system(
        plus_rows + minus_rows(estimates), table, columns, known=known
    )
    first = solve_system(
        system, regularization=regularization, reg_param=reg_param, cond_limit=cond_limit
    )
    solves = {"joint": first}
    values = first.as_dict()
    if refine:
        primed = estimates.copy()
        primed.update_result(first)
        system = realize_system(
            plus_rows + minus_rows(primed), table, columns, known=known
        )
        refined = solve_system(
            system, regularization=regularization, reg_param=reg_param, cond_limit=cond_limit
        )
        solves["refined"] = refined
        values = refined.as_dict()
    return StepResult(values, solves)


# ----------------------------------------------------------------------
# temperature and coupling density


@dataclass
class TemperatureEstimate:
    beta: float
    temperature_K: float
    objective: float
    n_harmonics: int


def estimate_temperature(estimates, grid, pair=(1, 2), k_min=1):
    """Inverse temperature from the symmetric/antisymmetric cross ratio.

    Fits coth(beta * w / 2) to S+/S- across harmonics by weighted least
    squares with |S-|^2 weights, which keeps noisy small-ratio harmonics
    from dominating.  Raises if the antisymmetric part carries no signal
    (a classical bath leaves the ratio undefined everywhere).
    """
    pair = tuple(pair)
    ks = np.arange(k_min, grid.k_max + 1)
    omegas = grid.omega(ks)
    s_plus = np.array(
        [
            estimates.value(pair, "plus_re", k) + 1j * estimates.value(pair, "plus_im", k)
            for k in ks
        ]
    )
    s_minus = np.array(
        [
            estimates.value(pair, "minus_re", k) + 1j * estimates.value(pair, "minus_im", k)
            for k in ks
        ]
    )
    if not (np.all(np.isfinite(s_plus)) and np.all(np.isfinite(s_minus))):
        raise ValueError("temperature fit needs completed spectrum estimates")
    scale = float(np.max(np.abs(s_plus)))
    if float(np.max(np.abs(s_minus))) <= 1e-12 * max(scale, 1e-300):
        raise ValueError(
            "antisymmetric cross spectrum carries no signal; the thermal "
            "ratio is degenerate at every harmonic"
        )
    weights = np.abs(s_minus) ** 2

    def objective(log_beta):
        ratio = coth(np.exp(log_beta) * omegas / 2.0)
        return float(np.sum(weights * np.abs(s_plus - ratio * s_minus) ** 2))

    opt = minimize_scalar(
        objective,
        bounds=(np.log(1e-6), np.log(1e6)),
        method="bounded",
        options={"xatol": 1e-12, "maxiter": 500},
    )
    beta = float(np.exp(opt.x))
    temperature = inverse_temperature_ps(1.0) / beta
    return TemperatureEstimate(beta, temperature, float(opt.fun), len(ks))


def estimate_spectral_density(estimates, grid, beta, pair=(1, 1), k_min=1):
    """Coupling density J at nonzero harmonics from a self spectrum.

    S+ for a thermal self spectrum equals 2*pi*J(w)*coth(beta*w/2), so J
    follows by division.  Zero frequency is excluded: the symmetric value
    there fixes only the ratio J(w)/w, not J itself.
    """
    if k_min < 1:
        raise ValueError("the coupling density is undetermined at zero frequency")
    pair = tuple(pair)
    ks = np.arange(k_min, grid.k_max + 1)
    omegas = grid.omega(ks)
    s_plus = np.array([estimates.value(pair, "plus_re", k) for k in ks])
    if not np.all(np.isfinite(s_plus)):
        raise ValueError("density estimate needs completed self-spectrum estimates")
    density = s_plus / (2.0 * np.pi * coth(beta * omegas / 2.0))
    return omegas, density


# ----------------------------------------------------------------------
# full pipeline


@dataclass
class ReconstructionResult:
    """Merged estimates and diagnostics from the full protocol chain."""

    grid: HarmonicGrid
    table: SpectrumTable
    estimates: SpectrumEstimates
    swap_estimates: SpectrumEstimates = None
    conditions: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    beta: float = None
    temperature_K: float = None
    density_omegas: np.ndarray = None
    density_values: np.ndarray = None

    def record(self, stage, step_result):
        for name, solve in step_result.solves.items():
            self.conditions[f"{stage}.{name}"] = solve.condition
            self.residuals[f"{stage}.{name}"] = solve.residual
        if step_result.note:
            self.notes.append(f"{stage}: {step_result.note}")


def run_reconstruction(
    model,
    grid,
    plan=None,
    mode="joint",
    shots=None,
    rng=None,
    omega_max=None,
    include_swap=True,
    refine_swap=True,
    refine_stages=1,
    regularization="none",
    reg_param=None,
    cond_limit=1e3,
    data=None,
):
    """Measure (or sample) a plan and run every reconstruction stage.

    The harmonic stages first run on the comb teeth alone, then
    `refine_stages` more times with the Fejer rows' off-tooth sidelobe
    content subtracted using interpolants of the current estimates (the
    teeth-only pass leaves a percent-level floor that the corrected
    passes remove).  Returns a ReconstructionResult whose primary
    estimates use the self alternating rows when the model carries a
    collective label and the swap route otherwise; when both are
    available the swap-route values are kept separately for
    consistency checks.  Passing `data` (keyed like `measure_plan`
    output) skips the measurement step, so callers can precompute or
    parallelize it.
    """
    if plan is None:
        plan = build_plan(grid, include_swap=include_swap)
    validate_plan(plan, model, grid)
    table = SpectrumTable(model, grid)
    if data is None:
        data = measure_plan(plan, model, omega_max=omega_max, shots=shots, rng=rng)
    estimates = SpectrumEstimates(table)
    result = ReconstructionResult(grid, table, estimates)
    common = dict(regularization=regularization, reg_param=reg_param, cond_limit=cond_limit)

    stage_corrections = None
    for pass_index in range(1 + refine_stages):
        tag = "" if pass_index == 0 else f"_pass{pass_index + 1}"
        step1 = protocol_diagonal_step1(
            data, plan, model, grid, table, mode=mode,
            corrections=stage_corrections, **common,
        )
        estimates.update(list(step1.values), list(step1.values.values()))
        result.record(f"step1{tag}", step1)

        step2 = protocol_diagonal_step2(
            data, plan, model, grid, table, estimates,
            corrections=stage_corrections, **common,
        )
        estimates.update(list(step2.values), list(step2.values.values()))
        result.record(f"step2{tag}", step2)

        if any(_dc_entries(entry) for entry in plan):
            dc = dc_reconstruct(
                data, plan, model, grid, table, estimates, omega_max=omega_max, **common
            )
            estimates.update(list(dc.values), list(dc.values.values()))
            if pass_index == 0:
                result.record("dc", dc)
            else:
                result.record(f"dc{tag}", StepResult(dc.values, dc.solves))
        elif pass_index == 0:
            # balanced stage cycles carry no weight at zero frequency, so
            # the harmonic solves stay leak-free and k = 0 is just absent
            result.notes.append("dc stage skipped: no uneven-spacing entries in the plan")
        if pass_index == refine_stages:
            break
        stage_corrections = background_corrections(
            plan,
            model,
            grid,
            table,
            estimates,
            labels={"c1_0", "c2_0", "c3_0", "c3_3", "d_minus"},
            entry_filter=_stage_entries,
            omega_max=omega_max,
        )

    step3 = protocol_step3_m2_self(
        data, plan, model, grid, table, estimates, omega_max=omega_max, **common
    )
    result.record("step3", step3)

    swap_available = any(_delta_entries(entry) for entry in plan)
    nondiag = None
    if swap_available:
        nondiag = protocol_nondiagonal_self(
            data, plan, model, grid, table, estimates,
            omega_max=omega_max, refine=refine_swap, **common,
        )
        result.record("nondiagonal", nondiag)

    if step3.values:
        estimates.update(list(step3.values), list(step3.values.values()))
        if nondiag is not None:
            swap_est = estimates.copy()
            swap_est.update(list(nondiag.values), list(nondiag.values.values()))
            result.swap_estimates = swap_est
    elif nondiag is not None:
        estimates.update(list(nondiag.values), list(nondiag.values.values()))

    cross = _cross_pairs(table)
    if cross:
        try:
            temp = estimate_temperature(estimates, grid, pair=cross[0])
            result.beta = temp.beta
            result.temperature_K = temp.temperature_K
        except ValueError as err:
            result.notes.append(f"temperature: {err}")
    if result.beta is not None and _self_pairs(table):
        omegas, density = estimate_spectral_density(
            estimates, grid, result.beta, pair=_self_pairs(table)[0]
        )
        result.density_omegas = omegas
        result.density_values = density
    return result
