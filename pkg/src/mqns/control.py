"""Instantaneous pulse/swap control and its switching-matrix compilation.

A sequence is a list of timed events on N qubits; each event holds an ordered
list of operations applied at that instant (pi pulses on a qubit set, or a
swap of two qubits). Compilation tracks how each Z string transforms into
the control frame: per segment, Z_c maps to sign * Z_row with exactly one row
per column, so the switching functions y_{a,a'}(t) are signed indicators.

Event times are exact rationals so that distinct construction routes never
produce spuriously coincident or misordered events.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .indices import parity, swap_bits

# ----------------------------------------------------------------------
# events and sequences


def as_fraction(x):
    """Exact rational from Fraction, int, str ("3/7" ok), or repr-clean float."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    if isinstance(x, str):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(str(x))
    raise TypeError(f"cannot interpret {x!r} as an exact time")


def pi_op(*qubits):
    return ("pi", tuple(sorted(qubits)))

def swap_op(qa, qb):
    if qa == qb:
        raise ValueError("swap needs two distinct qubits")
    return ("swap", tuple(sorted((qa, qb))))


@dataclass(frozen=True)
class ControlEvent:
    """Operations applied at one instant, in listed order."""

    time: Fraction
    ops: tuple

    def shifted(self, dt):
        return ControlEvent(self.time + dt, self.ops)


class Sequence:
    """Timed control events on n qubits over [0, duration]."""

    def __init__(self, n_qubits, duration, events, name=None, lattice=None):
        self.n_qubits = int(n_qubits)
        self.duration = as_fraction(duration)
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        evs = []
        for ev in events:
            if not isinstance(ev, ControlEvent):
                t, ops = ev
                ev = ControlEvent(as_fraction(t), tuple(ops))
            evs.append(ev)
        evs.sort(key=lambda e: e.time)
        for prev, cur in zip(evs, evs[1:]):
            if cur.time == prev.time:
                raise ValueError(f"duplicate event time {cur.time}; merge the op lists")
        self.events = tuple(evs)
        self.name = name
        for ev in self.events:
            if not (0 < ev.time <= self.duration):
                raise ValueError(f"event at {ev.time} outside (0, {self.duration}]")
            for kind, targets in ev.ops:
                if kind not in ("pi", "swap"):
                    raise ValueError(f"unknown op kind {kind!r}")
                for q in targets:
                    if not (1 <= q <= self.n_qubits):
                        raise ValueError(f"op targets qubit {q} of {self.n_qubits}")
        if lattice is not None:
            step = as_fraction(lattice)
            for ev in self.events:
                if (ev.time / step).denominator != 1:
                    raise ValueError(f"event time {ev.time} not on lattice {step}")

    def __repr__(self):
        tag = self.name or "sequence"
        return f"<{tag}: {self.n_qubits}q, T={self.duration}, {len(self.events)} events>"

    def shifted_events(self, dt):
        return [ev.shifted(dt) for ev in self.events]


def merge_timed_ops(timed_ops):
    """Combine (time, ops) items with equal times, preserving listed order."""
    out = []
    for t, ops in sorted(timed_ops, key=lambda item: item[0]):
        if out and out[-1][0] == t:
            out[-1] = (t, out[-1][1] + tuple(ops))
        else:
            out.append((t, tuple(ops)))
    return out


def repeat(sequence, m, name=None):
    """m back-to-back repetitions of a cycle."""
    if m < 1:
        raise ValueError("need at least one repetition")
    events = []
    for r in range(m):
        events.extend(sequence.shifted_events(sequence.duration * r))
    return Sequence(
        sequence.n_qubits,
        sequence.duration * m,
        events,
        name=name or (f"{sequence.name}x{m}" if sequence.name else None),
    )


def overlay(seq_a, seq_b, name=None):
    """Run two sequences on the same qubits and window simultaneously."""
    if seq_a.n_qubits != seq_b.n_qubits or seq_a.duration != seq_b.duration:
        raise ValueError("overlay needs matching qubit count and duration")
    merged = merge_timed_ops(
        [(ev.time, ev.ops) for ev in seq_a.events] + [(ev.time, ev.ops) for ev in seq_b.events]
    )
    return Sequence(seq_a.n_qubits, seq_a.duration, merged, name=name)


# ----------------------------------------------------------------------
# compilation into switching functions


class CompiledSchedule:
    """Per-segment signed-permutation action of control on Z strings.

    For segment j and column mask c: Z_c in the control frame equals
    sign[j, c] * Z_{row[j, c]}. Events at the final time contribute to
    `net_row`/`net_sign` (the frame at readout) but open no new segment.
    """

    def __init__(self, sequence):
        n = sequence.n_qubits
        dim = 1 << n
        self.n_qubits = n
        self.duration = sequence.duration
        self.name = sequence.name
        row = np.arange(dim)
        sign = np.ones(dim, dtype=np.int8)
        bounds = [Fraction(0)]
        rows, signs = [], []

        def emit(upto):
            rows.append(row.copy())
            signs.append(sign.copy())
            bounds.append(upto)

        for ev in sequence.events:
            if ev.time > bounds[-1]:
                emit(ev.time)
            # fold the instant's ops into the running frame, time order
            for kind, targets in ev.ops:
                if kind == "pi":
                    fmask = 0
                    for q in targets:
                        fmask |= 1 << (q - 1)
                    flip = np.array([-1 if parity(c & fmask) else 1 for c in range(dim)], dtype=np.int8)
                    sign = sign * flip
                elif kind == "swap":
                    qa, qb = targets
                    perm = np.array([swap_bits(c, qa, qb) for c in range(dim)])
                    row = row[perm]
                    sign = sign[perm]
        if bounds[-1] < sequence.duration:
            emit(sequence.duration)
        self.breakpoints = bounds
        self.seg_rows = np.array(rows)
        self.seg_signs = np.array(signs)
        self.net_row = row
        self.net_sign = sign

    @property
    def n_segments(self):
        return self.seg_rows.shape[0]

    @property
    def is_net_identity(self):
        dim = 1 << self.n_qubits
        return bool(np.all(self.net_row == np.arange(dim)) and np.all(self.net_sign == 1))

    def segment_bounds_float(self):
        return np.array([float(b) for b in self.breakpoints])

    def switching_matrix(self, segment):
        """Dense y matrix of one segment: entry [a, c] of Z_c -> y * Z_a."""
        dim = 1 << self.n_qubits
        y = np.zeros((dim, dim), dtype=int)
        y[self.seg_rows[segment], np.arange(dim)] = self.seg_signs[segment]
        return y

    def support_pairs(self):
        """Sorted (row a, column c) pairs whose switching function is not 0."""
        pairs = set()
        for j in range(self.n_segments):
            for c in range(1 << self.n_qubits):
                pairs.add((int(self.seg_rows[j, c]), c))
        return sorted(pairs)

    def entry_signs(self, a, c):
        """Per-segment values of y_{a,c}(t) (0 where column c sits elsewhere)."""
        vals = np.where(self.seg_rows[:, c] == a, self.seg_signs[:, c], 0)
        return vals.astype(float)

    def truncated(self, upto):
        """Schedule restricted to [0, upto] (exact Fraction cut, no events there)."""
        upto = as_fraction(upto)
        if not (0 < upto <= self.duration):
            raise ValueError("truncation point outside window")
        cut = CompiledSchedule.__new__(CompiledSchedule)
        cut.n_qubits = self.n_qubits
        cut.duration = upto
        cut.name = self.name
        keep = [b for b in self.breakpoints if b < upto]
        m = len(keep)  # segments fully or partially kept
        cut.breakpoints = keep + [upto]
        cut.seg_rows = self.seg_rows[:m].copy()
        cut.seg_signs = self.seg_signs[:m].copy()
        cut.net_row = self.seg_rows[m - 1].copy()
        cut.net_sign = self.seg_signs[m - 1].copy()
        return cut


def compile_sequence(sequence):
    return CompiledSchedule(sequence)


# ----------------------------------------------------------------------
# symmetry classification of switching functions


def _column_pieces(schedule, a, c):
    """(start, end, value) pieces of y_{a,c} over the window, exact bounds."""
    vals = schedule.entry_signs(a, c)
    bp = schedule.breakpoints
    return [(bp[j], bp[j + 1], vals[j]) for j in range(schedule.n_segments)]


def _value_at(pieces, t):
    for lo, hi, v in pieces:
        if lo <= t < hi:
            return v
    return pieces[-1][2] if t == pieces[-1][1] else 0.0


def classify_displacement(schedule, a, c):
    """sigma with y(t + T/2) = sigma*y(t) on [0, T/2), or None."""
    half = schedule.duration / 2
    pieces = _column_pieces(schedule, a, c)
    probes = set()
    for lo, hi, _ in pieces:
        for edge in (lo, hi):
            for base in (edge, edge - half):
                if 0 <= base < half:
                    probes.add(base)
    checks = []
    ordered = sorted(probes) + [half]
    for lo, hi in zip(ordered, ordered[1:]):
        mid = (lo + hi) / 2
        checks.append((_value_at(pieces, mid), _value_at(pieces, mid + half)))
    for sigma in (1, -1):
        if all(later == sigma * earlier for earlier, later in checks):
            return sigma
    return None


def classify_mirror(schedule, a, c):
    """sigma with y(T - t) = sigma*y(t), or None."""
    T = schedule.duration
    pieces = _column_pieces(schedule, a, c)
    probes = {Fraction(0), T}
    for lo, hi, _ in pieces:
        probes.update((lo, hi, T - lo, T - hi))
    ordered = sorted(p for p in probes if 0 <= p <= T)
    checks = []
    for lo, hi in zip(ordered, ordered[1:]):
        mid = (lo + hi) / 2
        checks.append((_value_at(pieces, mid), _value_at(pieces, T - mid)))
    for sigma in (1, -1):
        if all(mirrored == sigma * plain for plain, mirrored in checks):
            return sigma
    return None


def product_displacement_sign(schedule, pair_a, pair_b):
    """sigma_A when the two switching entries are oppositely displacement
    symmetric over the cycle (sigma_A * sigma_B = -1); otherwise None."""
    sig_a = classify_displacement(schedule, *pair_a)
    sig_b = classify_displacement(schedule, *pair_b)
    if sig_a is None or sig_b is None or sig_a * sig_b != -1:
        return None
    return sig_a


# ----------------------------------------------------------------------
# sequence library


def free(duration, n_qubits=1, name="free"):
    return Sequence(n_qubits, duration, [], name=name)


def _pulses_to_sequence(times, qubit, duration, n_qubits, name):
    events = [(t, [pi_op(qubit)]) for t in times]
    return Sequence(n_qubits, duration, merge_timed_ops(events), name=name)


def cpmg(duration, qubit=1, n_qubits=1):
    T = as_fraction(duration)
    return _pulses_to_sequence([T / 4, 3 * T / 4], qubit, T, n_qubits, "cpmg")


def _cdd_times(order, duration, offset=Fraction(0)):
    """Pulse instants of concatenated decoupling; adjacent duplicates cancel."""
    T = duration
    if order == 0:
        return set()
    inner = _cdd_times(order - 1, T / 2, offset)
    inner ^= {offset + T / 2}
    inner ^= _cdd_times(order - 1, T / 2, offset + T / 2)
    inner ^= {offset + T}
    return inner

def cdd(order, duration, qubit=1, n_qubits=1):
    if order < 1:
        raise ValueError("cdd order must be >= 1")
    T = as_fraction(duration)
    times = sorted(_cdd_times(order, T))
    return _pulses_to_sequence(times, qubit, T, n_qubits, f"cdd{order}")


def uneven_cdd1(duration, qubit=1, n_qubits=1):
    """Short CDD1 block (pulses at T/32 and T/16) then free evolution.

    Net identity per cycle, nonzero time average: passes DC weight.
    """
    T = as_fraction(duration)
    return _pulses_to_sequence([T / 32, T / 16], qubit, T, n_qubits, "uneven_cdd1")


def uneven_cdd1_single(duration, qubit=1, n_qubits=1):
    """Single pulse at T/32 (antiperiodic variant: net pi per cycle)."""
    T = as_fraction(duration)
    return _pulses_to_sequence([T / 32], qubit, T, n_qubits, "uneven_cdd1_single")


def swap_cdd(order, duration):
    """Two-qubit concatenated scheme alternating pi pulses with qubit swaps.

    Level k splits the window in four; at the quarter boundaries the gates
    are [pi(1), swap] at odd quarters and [swap, pi(2)] at even ones, with
    level k-1 blocks in between. Net identity at every level.
    """
    if order < 0:
        raise ValueError("order must be >= 0")
    T = as_fraction(duration)

    def build(k, T_k, t0):
        if k == 0:
            return []
        q = T_k / 4
        timed = []
        for i, boundary_ops in enumerate(
            (
                [pi_op(1), swap_op(1, 2)],
                [swap_op(1, 2), pi_op(2)],
                [pi_op(1), swap_op(1, 2)],
                [swap_op(1, 2), pi_op(2)],
            ),
            start=1,
        ):
            timed.extend(build(k - 1, q, t0 + (i - 1) * q))
            timed.append((t0 + i * q, boundary_ops))
        return timed

    events = merge_timed_ops(build(order, T, Fraction(0)))
    return Sequence(2, T, events, name=f"swap_cdd{order}")


_LIBRARY = {
    "free": lambda T, **kw: free(T, **kw),
    "cpmg": cpmg,
    "cdd1": lambda T, **kw: cdd(1, T, **kw),
    "cdd2": lambda T, **kw: cdd(2, T, **kw),
    "cdd3": lambda T, **kw: cdd(3, T, **kw),
    "cdd4": lambda T, **kw: cdd(4, T, **kw),
    "uneven_cdd1": uneven_cdd1,
    "uneven_cdd1_single": uneven_cdd1_single,
    "cdd1x2": lambda T, **kw: repeat(cdd(1, as_fraction(T) / 2, **kw), 2, name="cdd1x2"),
}


def library_sequence(name, duration, qubit=1, n_qubits=1):
    """Named single-qubit patterns (plus swap_cdd<k> on two qubits)."""
    if name.startswith("swap_cdd"):
        return swap_cdd(int(name[len("swap_cdd"):]), duration)
    if name not in _LIBRARY:
        raise KeyError(f"unknown sequence {name!r}")
    if name == "free":
        return free(duration, n_qubits=n_qubits)
    return _LIBRARY[name](duration, qubit=qubit, n_qubits=n_qubits)


def from_config(cfg, n_qubits=None):
    """Sequence from the config schema: a library name or explicit events."""
    if isinstance(cfg, str):
        raise ValueError("string config needs a duration; pass a dict")
    if "name" in cfg and "events" not in cfg:
        return library_sequence(
            cfg["name"],
            as_fraction(cfg["duration_ps"]),
            qubit=int(cfg.get("qubit", 1)),
            n_qubits=int(n_qubits or cfg.get("n_qubits", 1)),
        )
    events = []
    for item in cfg["events"]:
        kind = item["kind"]
        targets = tuple(int(q) for q in item["targets"])
        op = pi_op(*targets) if kind == "pi" else swap_op(*targets)
        events.append((as_fraction(item["time_ps"]), [op]))
    return Sequence(
        int(n_qubits or cfg["n_qubits"]),
        as_fraction(cfg["duration_ps"]),
        merge_timed_ops(events),
        name=cfg.get("name"),
    )
