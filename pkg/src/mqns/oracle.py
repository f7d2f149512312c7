"""Independent cross-checks of the cumulant engine.

Two routes that share no algebra with the coefficient integrals:

* Monte Carlo: sample stationary Gaussian fields with the model's classical
  spectral matrix, integrate them exactly against the switching functions of
  a compiled schedule (analytic segment integrals, no time grid), and average
  the dephasing factors over trajectories.

* Few-mode Fock: diagonalize the full lab-frame qubit+oscillator Hamiltonian
  in a truncated number basis and evolve the joint density matrix through the
  raw event list. Pure dephasing keeps the evolution block-diagonal over
  qubit basis states, so only bath-sized matrices ever appear.

The Fock route also certifies the compile convention end to end: it never
touches CompiledSchedule, applying each event's ops to the state in listed
order.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .control import compile_sequence
from .dynamics import DiscreteMeasure, coefficients_by_class, evaluator_for, multiplier_matrix
from .indices import single_qubit_masks, swap_bits, z_diagonal

# ----------------------------------------------------------------------
# Monte Carlo over classical Gaussian fields


def _classical_spectral_factors(model, nodes, tol=1e-8):
    """Factor L_k L_k^dag = S(w_k) over the single-qubit channels."""
    channels = single_qubit_masks(model.n_qubits)
    for a, b in model.classical:
        if a not in channels or b not in channels:
            raise ValueError("Monte Carlo supports classical noise on single-qubit masks only")
    nc = len(channels)
    smats = np.empty((nodes.size, nc, nc), dtype=complex)
    for i, a in enumerate(channels):
        for j, b in enumerate(channels):
            smats[:, i, j] = model.cross_spectrum(a, b, nodes)
            mirror = model.cross_spectrum(a, b, -nodes)
            if np.max(np.abs(mirror - np.conj(smats[:, i, j]))) > tol * (
                1.0 + np.max(np.abs(smats[:, i, j]))
            ):
                raise ValueError(
                    "Monte Carlo sampling needs classical spectra; "
                    "symmetrize the model first (variant('all'))"
                )
    herm = np.max(np.abs(smats - np.conj(np.swapaxes(smats, 1, 2))))
    if herm > tol * (1.0 + np.max(np.abs(smats))):
        raise ValueError("spectral matrix is not Hermitian")
    evals, evecs = np.linalg.eigh(0.5 * (smats + np.conj(np.swapaxes(smats, 1, 2))))
    floor = -1e-10 * max(1.0, float(np.max(np.abs(evals))))
    if float(evals.min()) < floor:
        raise ValueError("spectral matrix is not positive semidefinite")
    return channels, evecs * np.sqrt(np.clip(evals, 0.0, None))[:, None, :]


def _segment_weights(schedule, channels, nodes):
    """A[k, r, c] = sum_seg y_{row_r, ch_c}(seg) * Int_seg e^{-i w_k t} dt."""
    rows = sorted({a for a, _ in schedule.support_pairs() if a != 0})
    bounds = schedule.segment_bounds_float()
    t0, t1 = bounds[:-1], bounds[1:]
    w = nodes[:, None]
    d = (np.exp(-1j * w * t0[None, :]) - np.exp(-1j * w * t1[None, :])) / (1j * w)
    weights = np.zeros((nodes.size, len(rows), len(channels)), dtype=complex)
    for r, a in enumerate(rows):
        for c, ch in enumerate(channels):
            y = schedule.entry_signs(a, ch)
            if np.any(y):
                weights[:, r, c] = d @ y
    return rows, weights


def sample_phase_table(schedule, model, n_traj, rng, delta_omega=None, omega_max=None, chunk=4096):
    """Random dephasing phases phi[traj, i] per qubit basis state.

    The field of channel c is a staggered cosine series with spectral matrix
    S(w) of the model: zeta_c(t) = sum_k sqrt(2 dw / pi) Re[(L_k eta_k)_c
    e^{-i w_k t}], eta complex standard normal. Phases are the exact time
    integrals of the toggled fields over the schedule, so the only
    discretization is the frequency comb itself.
    """
    t_total = float(schedule.duration)
    if delta_omega is None:
        delta_omega = 2.0 * np.pi / (8.0 * t_total)
    if omega_max is None:
        omega_max = 6.0 * model.density.omega_c
    n_modes = int(np.ceil(omega_max / delta_omega))
    nodes = (np.arange(n_modes) + 0.5) * delta_omega

    channels, factors = _classical_spectral_factors(model, nodes)
    rows, weights = _segment_weights(schedule, channels, nodes)
    scale = np.sqrt(2.0 * delta_omega / np.pi)

    dim = 1 << schedule.n_qubits
    zrows = np.array([z_diagonal(a, schedule.n_qubits) for a in rows], dtype=float)
    phases = np.empty((n_traj, dim))
    done = 0
    while done < n_traj:
        m = min(chunk, n_traj - done)
        eta = (
            rng.standard_normal((m, n_modes, len(channels)))
            + 1j * rng.standard_normal((m, n_modes, len(channels)))
        ) / np.sqrt(2.0)
        colored = np.einsum("kij,tkj->tki", factors, eta)
        theta = scale * np.real(np.einsum("tkc,krc->tr", colored, weights))
        phases[done : done + m] = theta @ zrows
        done += m
    return phases


@dataclass
class MonteCarloResult:
    multipliers: np.ndarray
    stderr: np.ndarray
    n_traj: int


def mc_multipliers(schedule, model, n_traj, rng, delta_omega=None, omega_max=None):
    """Trajectory average of the dephasing factors exp(-i(phi_i - phi_j)).

    Each sample has unit modulus, so the per-element standard error is
    sqrt((1 - |mean|^2) / n).
    """
    phases = sample_phase_table(
        schedule, model, n_traj, rng, delta_omega=delta_omega, omega_max=omega_max
    )
    phasors = np.exp(-1j * phases)
    mult = np.einsum("ti,tj->ij", phasors, np.conj(phasors)) / n_traj
    stderr = np.sqrt(np.clip(1.0 - np.abs(mult) ** 2, 0.0, None) / n_traj)
    return MonteCarloResult(multipliers=mult, stderr=stderr, n_traj=n_traj)


# ----------------------------------------------------------------------
# few-mode bosonic bath, exact Fock-space evolution


@dataclass(frozen=True)
class BosonMode:
    """One oscillator: frequency (rad/ps), occupation, coupling per qubit."""

    omega: float
    nbar: float
    couplings: tuple

    def __post_init__(self):
        if self.omega <= 0:
            raise ValueError("mode frequency must be positive")
        if self.nbar < 0:
            raise ValueError("mode occupation must be nonnegative")
        object.__setattr__(self, "couplings", tuple(complex(g) for g in self.couplings))

    def levels_for(self, tail=1e-9):
        """Truncation keeping the thermal weight above `tail`."""
        if self.nbar == 0:
            return 8
        q = self.nbar / (self.nbar + 1.0)
        return max(8, int(np.ceil(np.log(tail) / np.log(q))))


class FewModeBath:
    """A small collection of thermal oscillators linearly coupled to Z's."""

    def __init__(self, modes, collective=True):
        self.modes = tuple(modes)
        self.collective = collective
        if not 1 <= len(self.modes) <= 4:
            raise ValueError("exact Fock evolution supports 1 to 4 modes")
        n_qubits = {len(m.couplings) for m in self.modes}
        if len(n_qubits) != 1:
            raise ValueError("all modes must couple to the same number of qubits")
        self.n_qubits = n_qubits.pop()
        freqs = [m.omega for m in self.modes]
        if len(set(freqs)) != len(freqs):
            raise ValueError("mode frequencies must be distinct")

    def channel_amplitude(self, mode, mask):
        """Coupling of `mode` to the bath operator labeled by `mask`."""
        if mask == 0:
            return sum(mode.couplings) if self.collective else 0.0
        return mode.couplings[mask.bit_length() - 1] if mask in single_qubit_masks(self.n_qubits) else 0.0

    def bath_masks(self):
        masks = list(single_qubit_masks(self.n_qubits))
        return ([0] + masks) if self.collective else masks

    def measure(self):
        """Exact spectral point masses: the engine's closed-form partner.

        (1/2pi) Int S_ab(w) f(w) dw =
            sum_k nbar_k g_k^a conj(g_k^b) f(-W_k)
                + (nbar_k + 1) conj(g_k^a) g_k^b f(+W_k)
        """
        order = np.argsort([m.omega for m in self.modes])
        pos = [self.modes[i] for i in order]
        nodes = np.array([-m.omega for m in pos[::-1]] + [m.omega for m in pos])
        masks = self.bath_masks()
        masses = {}
        for a in masks:
            for b in masks:
                neg = [
                    m.nbar * self.channel_amplitude(m, a) * np.conj(self.channel_amplitude(m, b))
                    for m in pos[::-1]
                ]
                posm = [
                    (m.nbar + 1.0)
                    * np.conj(self.channel_amplitude(m, a))
                    * self.channel_amplitude(m, b)
                    for m in pos
                ]
                masses[(a, b)] = np.array(neg + posm, dtype=complex)
        return DiscreteMeasure(nodes, masses)


def _mode_operators(levels):
    """Kronecker-product lowering operators and the bath Hamiltonian pieces."""
    ops = []
    for i, nl in enumerate(levels):
        a = np.diag(np.sqrt(np.arange(1, nl)), k=1)
        full = np.eye(1)
        for j, ml in enumerate(levels):
            block = a if j == i else np.eye(ml)
            full = np.kron(full, block)
        ops.append(full)
    return ops


def fock_multipliers(sequence, bath, tail=1e-9, unitarity_tol=1e-9):
    """Exact dephasing multipliers of the raw event list from |+...+>.

    Evolves the joint system in the lab frame; the control enters as explicit
    X/SWAP unitaries applied in the listed order of each event. The sequence
    must return the qubit frame to the identity (append closing ops at the
    final time otherwise).
    """
    n = sequence.n_qubits
    if n != bath.n_qubits:
        raise ValueError("sequence and bath disagree on the number of qubits")
    dim = 1 << n
    levels = [m.levels_for(tail) for m in bath.modes]
    db = int(np.prod(levels))
    if dim * db > 6000:
        raise ValueError("truncated space too large for the exact oracle")

    lower = _mode_operators(levels)
    h_bath = sum(m.omega * (op.conj().T @ op) for m, op in zip(bath.modes, lower))
    coupl = {}
    for mask in bath.bath_masks():
        op_sum = np.zeros((db, db), dtype=complex)
        for m, op in zip(bath.modes, lower):
            g = bath.channel_amplitude(m, mask)
            op_sum += g * op.conj().T + np.conj(g) * op
        coupl[mask] = op_sum

    # block Hamiltonian per qubit basis state, diagonalized once
    eigs = []
    for i in range(dim):
        h = h_bath.astype(complex).copy()
        if bath.collective:
            h += coupl[0]
        for mask in single_qubit_masks(n):
            h += float(z_diagonal(mask, n)[i]) * coupl[mask]
        eigs.append(np.linalg.eigh(h))

    def free_block(i, dt):
        evals, evecs = eigs[i]
        u = (evecs * np.exp(-1j * evals * dt)) @ evecs.conj().T
        defect = np.max(np.abs(u @ u.conj().T - np.eye(db)))
        if defect > unitarity_tol:
            raise FloatingPointError(f"segment propagator unitarity defect {defect:.2e}")
        return u

    # running map |i> (x) phi -> |sigma(i)> (x) V_i phi
    sigma = np.arange(dim)
    blocks = [np.eye(db, dtype=complex) for _ in range(dim)]
    now = Fraction(0)

    def advance(upto):
        nonlocal now
        dt = float(upto - now)
        if dt > 0:
            for i in range(dim):
                blocks[i] = free_block(int(sigma[i]), dt) @ blocks[i]
        now = upto

    for ev in sequence.events:
        advance(ev.time)
        for kind, targets in ev.ops:
            if kind == "pi":
                fmask = 0
                for q in targets:
                    fmask |= 1 << (q - 1)
                sigma = sigma ^ fmask
            elif kind == "swap":
                qa, qb = targets
                sigma = np.array([swap_bits(int(s), qa, qb) for s in sigma])
            else:
                raise ValueError(f"unknown op kind {kind!r}")
    advance(sequence.duration)
    if not np.all(sigma == np.arange(dim)):
        raise ValueError("exact oracle needs a net-identity sequence (append closing ops)")

    weights = np.ones(1)
    for m, nl in zip(bath.modes, levels):
        q = m.nbar / (m.nbar + 1.0)
        w = q ** np.arange(nl)
        weights = np.kron(weights, w / w.sum())

    mult = np.empty((dim, dim), dtype=complex)
    for i in range(dim):
        vi_w = blocks[i] * weights[None, :]
        for j in range(dim):
            mult[i, j] = np.sum(vi_w * np.conj(blocks[j]))
    return mult


def fock_prediction(sequence, bath):
    """Engine-side multipliers for the same bath, via its exact point measure."""
    measure = bath.measure()
    sched = compile_sequence(sequence)
    ev = evaluator_for(sched, measure)
    coeffs = coefficients_by_class(ev, measure, sequence.n_qubits)
    return multiplier_matrix(coeffs, sequence.n_qubits)
