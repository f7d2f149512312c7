"""Second-order time-convolutionless dynamics of a driven probe qubit.

A continuously driven qubit, H_0 = -(g/2) sigma_x, couples to the bath
through A = sigma_z + c. In the interaction picture the master equation is

    d rho / dt = -[A(t), Lam(t) rho - rho Lam_bar(t)],

with A(t) = cos(gt) sigma_z - sin(gt) sigma_y + c and

    Lam(t) = [cos(gt) I_c + sin(gt) I_s] sigma_z
             - [sin(gt) I_c - cos(gt) I_s] sigma_y + c mu_0,

where I_c = (mu_+ + mu_-)/2, I_s = (mu_+ - mu_-)/(2i) and
mu_pm(t) = Int_0^t C(tau) e^{+-i g tau} dtau. Lam_bar is Lam with the scalar
coefficients conjugated (the operators stay). The memory integrals converge
on the bath correlation time, after which the generator is stationary and
populations relax at the golden-rule rates S(+-g): spectroscopy of the
spectrum at the Rabi frequency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .filters import FrequencyGrid

_SZ = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
_SY = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
_EYE = np.eye(2, dtype=complex)
_PLUS_X = 0.5 * np.array([[1.0, 1.0], [1.0, 1.0]], dtype=complex)


def bath_correlation(spectrum, taus, omega_max, points_per_panel=8):
    """C(tau) = (1/2pi) Int S(w) e^{-i w tau} dw on nonnegative lags."""
    taus = np.asarray(taus, dtype=float)
    grid = FrequencyGrid(omega_max, max(float(taus.max()), 1.0), points_per_panel)
    svals = np.asarray(spectrum(grid.nodes), dtype=complex) * grid.weights
    out = np.empty(taus.shape, dtype=complex)
    for start in range(0, taus.size, 256):
        chunk = taus[start : start + 256]
        out[start : start + 256] = np.exp(-1j * np.outer(chunk, grid.nodes)) @ svals
    return out / (2.0 * np.pi)


def _cumtrapz(values, dx):
    steps = 0.5 * dx * (values[1:] + values[:-1])
    return np.concatenate([[0.0 + 0.0j], np.cumsum(steps)])


@dataclass
class DrivenResult:
    times: np.ndarray
    rhos: np.ndarray
    rabi_frequency: float

    def populations_x(self):
        """Populations of the drive eigenstates |+x> (lower) and |-x>."""
        p_plus = np.einsum("tij,ji->t", self.rhos, _PLUS_X).real
        return p_plus, 1.0 - p_plus

    def steady_ratio(self):
        p_plus, p_minus = self.populations_x()
        return p_plus[-1] / p_minus[-1]


def tcl2_evolve(
    spectrum,
    g,
    t_final,
    dt=0.05,
    c_offset=0.0,
    rho0=None,
    omega_max=None,
    tau_corr=None,
):
    """Fixed-step RK4 integration of the TCL2 master equation.

    `spectrum` is the two-sided bath spectrum (callable on a frequency
    array). Memory kernels are truncated at `tau_corr`, which must cover the
    decay of C(tau) (checked); `omega_max` bounds the spectral support.
    """
    if rho0 is None:
        rho0 = _PLUS_X
    if omega_max is None:
        omega_max = 10.0
    steps = int(round(t_final / dt))
    half = dt / 2.0
    lattice = np.arange(2 * steps + 1) * half

    if tau_corr is None:
        tau_corr = min(float(t_final), 40.0)
    n_corr = min(int(np.ceil(tau_corr / half)), 2 * steps)
    corr = np.zeros(2 * steps + 1, dtype=complex)
    corr[: n_corr + 1] = bath_correlation(spectrum, lattice[: n_corr + 1], omega_max)
    if n_corr < 2 * steps and abs(corr[n_corr]) > 1e-6 * abs(corr[0]):
        raise ValueError("tau_corr does not cover the bath correlation time")

    mu_plus = _cumtrapz(corr * np.exp(1j * g * lattice), half)
    mu_minus = _cumtrapz(corr * np.exp(-1j * g * lattice), half)
    mu_zero = _cumtrapz(corr, half)
    ic = 0.5 * (mu_plus + mu_minus)
    isn = (mu_plus - mu_minus) / 2.0j

    cos_g = np.cos(g * lattice)
    sin_g = np.sin(g * lattice)

    def deriv(idx, rho):
        a_op = cos_g[idx] * _SZ - sin_g[idx] * _SY + c_offset * _EYE
        lam_z = cos_g[idx] * ic[idx] + sin_g[idx] * isn[idx]
        lam_y = -(sin_g[idx] * ic[idx] - cos_g[idx] * isn[idx])
        lam = lam_z * _SZ + lam_y * _SY + c_offset * mu_zero[idx] * _EYE
        lam_bar = (
            np.conj(lam_z) * _SZ + np.conj(lam_y) * _SY + c_offset * np.conj(mu_zero[idx]) * _EYE
        )
        inner = lam @ rho - rho @ lam_bar
        return -(a_op @ inner - inner @ a_op)

    rho = np.array(rho0, dtype=complex)
    rhos = np.empty((steps + 1, 2, 2), dtype=complex)
    rhos[0] = rho
    for n in range(steps):
        i0 = 2 * n
        k1 = deriv(i0, rho)
        k2 = deriv(i0 + 1, rho + half * k1)
        k3 = deriv(i0 + 1, rho + half * k2)
        k4 = deriv(i0 + 2, rho + dt * k3)
        rho = rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        rho = 0.5 * (rho + rho.conj().T)
        rhos[n + 1] = rho
    return DrivenResult(times=np.arange(steps + 1) * dt, rhos=rhos, rabi_frequency=g)


# ----------------------------------------------------------------------
# spin-locking spectroscopy


def saturation_curve(t, weight, rate):
    return weight * (1.0 - np.exp(-rate * t))


def spin_locking_rates(times, excited_population):
    """(upward, downward) golden-rule rates from a relaxation transient.

    Fits p(t) = w (1 - e^{-r t}) for evolution started in the lower drive
    eigenstate; then upward = w r estimates S(-g) and downward = (1 - w) r
    estimates S(+g).
    """
    times = np.asarray(times, dtype=float)
    pop = np.asarray(excited_population, dtype=float)
    w0 = max(float(pop[-1]), 1e-6)
    crossing = pop >= 0.63 * w0
    r0 = 1.0 / times[crossing][0] if np.any(crossing) else 1.0 / times[-1]
    (w, r), _ = curve_fit(saturation_curve, times, pop, p0=(w0, r0), maxfev=20000)
    return w * r, (1.0 - w) * r
