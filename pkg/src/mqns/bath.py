"""Spectra of stationary Gaussian dephasing environments.

Convention: S_ab(w) = Int dtau e^{+i w tau} <B_a(tau) B_b(0)>, with hbar = 1,
frequencies in rad/ps and times in ps. A thermal bosonic bath then obeys
detailed balance S(w)/S(-w) = e^{beta w}, and the symmetric/antisymmetric
parts are

    S+_ab(w) = S_ab(w) + S_ba(-w),    S-_ab(w) = S_ab(w) - S_ba(-w),

with (S+-_ab(w))* = +-S+-_ab(-w) = S+-_ba(w).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .indices import is_single, qubit_of, single_qubit_masks

# hbar/kB in K*ps (CODATA 2018): beta_ps = HBAR_OVER_KB_K_PS / T_kelvin.
HBAR_OVER_KB_K_PS = 7.638232577


def inverse_temperature_ps(temperature_K):
    """beta in ps (angular-frequency units) for a temperature in kelvin."""
    return HBAR_OVER_KB_K_PS / temperature_K


def coth(x):
    """coth(x) for x != 0, stable at both small and large |x|."""
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        # expm1 keeps small-x accuracy; overflow at large x correctly gives 1.
        return 1.0 + 2.0 / np.expm1(2.0 * x)


@dataclass(frozen=True)
class OhmicDensity:
    """Spectral density J(w) = xi * |w| * exp(-(w/omega_c)^2), even in w."""

    xi: float
    omega_c: float

    def __call__(self, omega):
        w = np.asarray(omega, dtype=float)
        return self.xi * np.abs(w) * np.exp(-((w / self.omega_c) ** 2))

    @property
    def slope_at_zero(self):
        """lim_{w->0+} J(w)/w, sets the zero-frequency spectrum 2*pi*slope/beta."""
        return self.xi


def thermal_spectrum(density, beta, omega):
    """Two-sided thermal spectrum pi*J(w)*[coth(beta|w|/2) + sign(w)].

    Continuous at w = 0 with value 2*pi*density.slope_at_zero/beta.
    """
    w = np.atleast_1d(np.asarray(omega, dtype=float))
    out = np.empty(w.shape, dtype=float)
    nz = w != 0.0
    wn = w[nz]
    out[nz] = np.pi * density(wn) * (coth(beta * np.abs(wn) / 2.0) + np.sign(wn))
    out[~nz] = 2.0 * np.pi * density.slope_at_zero / beta
    if np.isscalar(omega) or np.asarray(omega).ndim == 0:
        return out[0]
    return out


@dataclass
class DephasingModel:
    """Spectral matrix of an N-qubit Gaussian dephasing environment.

    Bath operators are labeled by Z-string masks. Weight-one masks carry the
    thermal bath seen by that qubit, with propagation delays `transit_times`
    between qubits (antisymmetric, ps). Mask 0 is the collective operator
    (the sum of the weight-one ones) when `collective` is True and absent
    otherwise. Any mask pair may carry extra classical noise via `classical`,
    a map (mask_a, mask_b) -> callable S_ab(w); Hermitian partners are filled
    in automatically.

    `zero_minus` discards antisymmetric spectral content: "self" symmetrizes
    the per-qubit self-spectra only, "all" symmetrizes every quantum pair.
    `independent` severs the thermal cross-correlations between qubits (each
    qubit then sees its own identical copy of the bath).
    """

    n_qubits: int
    density: OhmicDensity
    beta: float
    transit_times: np.ndarray
    collective: bool = True
    classical: dict = field(default_factory=dict)
    zero_minus: str = "none"
    independent: bool = False

    def __post_init__(self):
        self.transit_times = np.asarray(self.transit_times, dtype=float)
        if self.transit_times.shape != (self.n_qubits, self.n_qubits):
            raise ValueError("transit_times must be N x N")
        if not np.allclose(self.transit_times, -self.transit_times.T):
            raise ValueError("transit_times must be antisymmetric")
        if self.zero_minus not in ("none", "self", "all"):
            raise ValueError(f"unknown zero_minus mode {self.zero_minus!r}")

    # ------------------------------------------------------------------
    # construction helpers

    @classmethod
    def from_config(cls, cfg, classical=None):
        """Build from a plain dict (the model-file schema)."""
        n = int(cfg["N"])
        density = OhmicDensity(xi=float(cfg["xi"]), omega_c=float(cfg["omega_c_rad_per_ps"]))
        beta = inverse_temperature_ps(float(cfg["temperature_K"]))
        if "transit_times_ps" in cfg:
            tt = np.asarray(cfg["transit_times_ps"], dtype=float)
        else:
            pos = np.asarray(cfg["positions_nm"], dtype=float)
            vel = float(cfg["velocity_nm_per_ps"])
            tt = (pos[None, :] - pos[:, None]) / vel
        model_class = str(cfg.get("model_class", "m2")).lower()
        if model_class not in ("m1", "m2"):
            raise ValueError(f"unknown model_class {model_class!r}")
        return cls(
            n_qubits=n,
            density=density,
            beta=beta,
            transit_times=tt,
            collective=(model_class == "m2"),
            classical=dict(classical or {}),
            independent=bool(cfg.get("independent", False)),
        )

    def variant(self, zero_minus):
        """Copy of the model with a different antisymmetric-content filter."""
        return DephasingModel(
            n_qubits=self.n_qubits,
            density=self.density,
            beta=self.beta,
            transit_times=self.transit_times,
            collective=self.collective,
            classical=dict(self.classical),
            zero_minus=zero_minus,
            independent=self.independent,
        )

    # ------------------------------------------------------------------
    # evaluation

    @property
    def bath_masks(self):
        """Masks carrying a nonvanishing bath operator."""
        masks = set(single_qubit_masks(self.n_qubits))
        if self.collective:
            masks.add(0)
        for a, b in self.classical:
            masks.add(a)
            masks.add(b)
        return sorted(masks)

    def has_pair(self, a, b):
        """Whether S_ab can be nonzero."""
        if self._expand(a) and self._expand(b):
            return True
        return self._classical_lookup(a, b) is not None

    def cross_spectrum(self, a, b, omega):
        """S_ab(w) as a complex array over `omega`."""
        omega = np.asarray(omega, dtype=float)
        out = np.zeros(omega.shape, dtype=complex)
        for la in self._expand(a):
            for lb in self._expand(b):
                out += self._single_pair(la, lb, omega)
        extra = self._classical_lookup(a, b)
        if extra is not None:
            out += extra(omega)
        return out

    def _expand(self, mask):
        """Quantum content of a bath mask as a list of qubit numbers."""
        if mask == 0:
            return list(range(1, self.n_qubits + 1)) if self.collective else []
        if is_single(mask):
            return [qubit_of(mask)]
        return []

    def _single_pair(self, la, lb, omega):
        if self.independent and la != lb:
            return np.zeros(np.shape(omega), dtype=complex)
        t_ab = self.transit_times[la - 1, lb - 1]
        sym_only = self.zero_minus == "all" or (self.zero_minus == "self" and la == lb)
        envelope = thermal_spectrum(self.density, self.beta, omega)
        if sym_only:
            envelope = 0.5 * (envelope + thermal_spectrum(self.density, self.beta, -omega))
        return envelope * np.exp(-1j * omega * t_ab)

    def _classical_lookup(self, a, b):
        if (a, b) in self.classical:
            return self.classical[(a, b)]
        if (b, a) in self.classical:
            other = self.classical[(b, a)]
            return lambda w: np.conj(other(np.asarray(w, dtype=float)))
        return None


def split_spectrum(model, a, b, omega):
    """(S+_ab, S-_ab) on `omega` from the two-sided cross-spectrum."""
    omega = np.asarray(omega, dtype=float)
    s_fwd = model.cross_spectrum(a, b, omega)
    s_rev = model.cross_spectrum(b, a, -omega)
    return s_fwd + s_rev, s_fwd - s_rev


def check_symmetries(model, omega, detailed_balance=None):
    """Max violations of the exact spectral symmetries on a grid.

    Returns a dict of named residuals; all should be at rounding level.
    `detailed_balance` defaults to checking thermal pairs only when no
    antisymmetric content has been filtered out.
    """
    omega = np.asarray(omega, dtype=float)
    if detailed_balance is None:
        detailed_balance = model.zero_minus == "none"
    masks = model.bath_masks
    out = {"hermitian": 0.0, "split_conjugate": 0.0, "split_transpose": 0.0, "psd": 0.0}
    for a in masks:
        for b in masks:
            if not model.has_pair(a, b):
                continue
            s_ab = model.cross_spectrum(a, b, omega)
            s_ba = model.cross_spectrum(b, a, omega)
            out["hermitian"] = max(out["hermitian"], np.max(np.abs(s_ab - np.conj(s_ba))))
            plus_ab, minus_ab = split_spectrum(model, a, b, omega)
            plus_neg, minus_neg = split_spectrum(model, a, b, -omega)
            plus_ba, minus_ba = split_spectrum(model, b, a, omega)
            out["split_conjugate"] = max(
                out["split_conjugate"],
                np.max(np.abs(np.conj(plus_ab) - plus_neg)),
                np.max(np.abs(np.conj(minus_ab) + minus_neg)),
            )
            out["split_transpose"] = max(
                out["split_transpose"],
                np.max(np.abs(np.conj(plus_ab) - plus_ba)),
                np.max(np.abs(np.conj(minus_ab) - minus_ba)),
            )
    singles = single_qubit_masks(model.n_qubits)
    for w in omega:
        mat = np.array(
            [[complex(model.cross_spectrum(a, b, np.array([w]))[0]) for b in singles] for a in singles]
        )
        eig = np.linalg.eigvalsh(0.5 * (mat + mat.conj().T))
        out["psd"] = max(out["psd"], max(0.0, -float(eig.min())))
    if detailed_balance:
        wnz = omega[omega != 0.0]
        env_p = thermal_spectrum(model.density, model.beta, wnz)
        env_m = thermal_spectrum(model.density, model.beta, -wnz)
        out["detailed_balance"] = float(
            np.max(np.abs(env_p - env_m * np.exp(model.beta * wnz)))
        )
    return out
