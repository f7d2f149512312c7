"""First- and second-order filter functions of piecewise-constant switching.

For a switching entry y(t) over a window of segments, the fundamental
transform is F1(w) = Int_0^t y(s) e^{i w s} ds; the ordered double integral
F2_AB(w) = Int_0^t ds Int_0^s ds' y_A(s) y_B(s') e^{i w (s - s')} completes
the second-cumulant kernel. Both are assembled exactly from per-segment
closed forms, and cycle repetition is applied analytically rather than by
re-integrating a long window.

All evaluators operate on a reflection-symmetric frequency grid so that a
value array at -w is just the reversed array.
"""

from __future__ import annotations

import numpy as np

from .control import as_fraction

# ----------------------------------------------------------------------
# segment primitives


def _e1(x):
    """(e^x - 1)/x with a series branch near 0 (complex-safe)."""
    x = np.asarray(x, dtype=complex)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-2
    xs = x[small]
    # Horner form of sum_{n=0..6} x^n/(n+1)!
    coeffs = [1 / 5040, 1 / 720, 1 / 120, 1 / 24, 1 / 6, 1 / 2, 1.0]
    acc = np.full_like(xs, coeffs[0])
    for c in coeffs[1:]:
        acc = acc * xs + c
    out[small] = acc
    xl = x[~small]
    out[~small] = (np.exp(xl) - 1.0) / xl
    return out


def _e2(x):
    """(e^x - 1 - x)/x^2 with a series branch near 0 (complex-safe)."""
    x = np.asarray(x, dtype=complex)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-2
    xs = x[small]
    coeffs = [1 / 40320, 1 / 5040, 1 / 720, 1 / 120, 1 / 24, 1 / 6, 1 / 2]
    acc = np.full_like(xs, coeffs[0])
    for c in coeffs[1:]:
        acc = acc * xs + c
    out[small] = acc
    xl = x[~small]
    out[~small] = (np.exp(xl) - 1.0 - xl) / xl**2
    return out


def segment_transform(omega, start, width):
    """Int_start^{start+width} e^{i w s} ds on the node array."""
    x = 1j * omega * width
    return width * np.exp(1j * omega * start) * _e1(x)


# ----------------------------------------------------------------------
# frequency grids


class FrequencyGrid:
    """Symmetric panel Gauss-Legendre grid on [-omega_max, omega_max].

    Panel width is capped at pi/(8 * t_total) so integrands oscillating as
    fast as e^{i w t_total} are resolved with many points per period. No node
    sits at w = 0, and nodes[::-1] == -nodes exactly.
    """

    def __init__(self, omega_max, t_total, points_per_panel=8, panel_cap=None):
        cap = panel_cap if panel_cap is not None else np.pi / (8.0 * float(t_total))
        n_panels = max(1, int(np.ceil(omega_max / cap)))
        edges = np.linspace(0.0, omega_max, n_panels + 1)
        x, w = np.polynomial.legendre.leggauss(points_per_panel)
        half = 0.5 * (edges[1:] - edges[:-1])
        mid = 0.5 * (edges[1:] + edges[:-1])
        pos_nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
        pos_weights = (half[:, None] * w[None, :]).ravel()
        self.nodes = np.concatenate([-pos_nodes[::-1], pos_nodes])
        self.weights = np.concatenate([pos_weights[::-1], pos_weights])
        self.omega_max = float(omega_max)

    def __len__(self):
        return self.nodes.size

    def integrate(self, values):
        return self.weights @ values


def symmetric_nodes(positive_values):
    """Symmetric ascending node array from distinct positive frequencies."""
    pos = np.sort(np.asarray(positive_values, dtype=float))
    if pos.size and pos[0] <= 0:
        raise ValueError("frequencies must be positive")
    return np.concatenate([-pos[::-1], pos])


def check_symmetric(nodes):
    nodes = np.asarray(nodes, dtype=float)
    if nodes.size % 2 or not np.array_equal(nodes[::-1], -nodes):
        raise ValueError("node array must satisfy nodes[::-1] == -nodes")
    return nodes


# ----------------------------------------------------------------------
# single-window evaluation with caching


class CycleCache:
    """F1/F2 arrays of one compiled window on a fixed symmetric grid."""

    def __init__(self, schedule, nodes):
        self.schedule = schedule
        self.nodes = check_symmetric(nodes)
        bounds = schedule.segment_bounds_float()
        self.starts = bounds[:-1]
        self.widths = np.diff(bounds)
        self.duration = float(schedule.duration)
        self._e_seg = {}
        self._f1 = {}
        self._f2 = {}

    def _segment(self, j):
        if j not in self._e_seg:
            self._e_seg[j] = segment_transform(self.nodes, self.starts[j], self.widths[j])
        return self._e_seg[j]

    def entry(self, pair):
        return self.schedule.entry_signs(*pair)

    def f1(self, pair):
        """F1 of entry (a, c) over the window."""
        if pair not in self._f1:
            y = self.entry(pair)
            total = np.zeros(self.nodes.size, dtype=complex)
            for j, yj in enumerate(y):
                if yj:
                    total += yj * self._segment(j)
            self._f1[pair] = total
        return self._f1[pair]

    def f2(self, pair_a, pair_b):
        """Ordered F2_AB over the window."""
        key = (pair_a, pair_b)
        if key not in self._f2:
            ya = self.entry(pair_a)
            yb = self.entry(pair_b)
            total = np.zeros(self.nodes.size, dtype=complex)
            prefix = np.zeros(self.nodes.size, dtype=complex)  # F1_B(-w) over earlier segments
            for j in range(self.widths.size):
                ej = self._segment(j)
                if ya[j]:
                    total += ya[j] * ej * prefix
                    if yb[j]:
                        x = 1j * self.nodes * self.widths[j]
                        total += ya[j] * yb[j] * self.widths[j] ** 2 * _e2(x)
                if yb[j]:
                    prefix = prefix + yb[j] * ej[::-1]
            self._f2[key] = total
        return self._f2[key]

    def support_pairs(self):
        return self.schedule.support_pairs()


# ----------------------------------------------------------------------
# repetition and mid-cycle assembly


def geometric_comb(omega, T, m):
    """E_m(w) = sum_{r<m} e^{i w r T}."""
    out = np.zeros(np.shape(omega), dtype=complex)
    for r in range(m):
        out += np.exp(1j * np.asarray(omega) * (r * T))
    return out


def pyramid_comb(omega, T, m):
    """Q_m(w) = sum_{d=1}^{m-1} (m - d) e^{i w d T}."""
    out = np.zeros(np.shape(omega), dtype=complex)
    for d in range(1, m):
        out += (m - d) * np.exp(1j * np.asarray(omega) * (d * T))
    return out


class FilterEvaluator:
    """Filter functions of m cycle repetitions plus an optional partial cycle.

    The window is [0, m*T_c + tau] with 0 <= tau < T_c. Full-cycle content is
    assembled from one-cycle arrays with the exact identities

        F1(w)   = F1_c(w) E_m(w) + e^{i w m T_c} F1_partial(w),
        F2_AB(w)= m F2c_AB + F1c_A(w) F1c_B(-w) Q_m(w)
                  + e^{i w m T_c} F1p_A(w) F1c_B(-w) E_m(-w) + F2p_AB(w).
    """

    def __init__(self, cycle, repetitions=1, tau=None):
        self.cycle = cycle
        self.nodes = cycle.nodes
        self.m = int(repetitions)
        if self.m < 0:
            raise ValueError("repetitions must be >= 0")
        if (self.m > 1 or (self.m == 1 and tau is not None)) and not cycle.schedule.is_net_identity:
            # repeated cycles only tile identically when the frame closes
            raise ValueError("cycle repetition needs a net-identity control cycle")
        self.partial = None
        if tau is not None:
            tau = as_fraction(tau)
            if not (0 <= tau < cycle.schedule.duration):
                raise ValueError("partial time must sit inside one cycle")
            if tau > 0:
                self.partial = CycleCache(cycle.schedule.truncated(tau), cycle.nodes)
        self.t_total = self.m * float(cycle.schedule.duration) + (
            float(self.partial.schedule.duration) if self.partial else 0.0
        )
        Tc = float(cycle.schedule.duration)
        self._E = geometric_comb(self.nodes, Tc, self.m)
        self._Q = pyramid_comb(self.nodes, Tc, self.m)
        self._phase = np.exp(1j * self.nodes * (self.m * Tc))
        self._f1 = {}
        self._f2 = {}

    def support_pairs(self):
        return self.cycle.support_pairs()

    def f1(self, pair):
        if pair not in self._f1:
            total = self.cycle.f1(pair) * self._E
            if self.partial is not None:
                total = total + self._phase * self.partial.f1(pair)
            self._f1[pair] = total
        return self._f1[pair]

    def f2(self, pair_a, pair_b):
        key = (pair_a, pair_b)
        if key not in self._f2:
            c = self.cycle
            total = self.m * c.f2(pair_a, pair_b)
            total = total + c.f1(pair_a) * c.f1(pair_b)[::-1] * self._Q
            if self.partial is not None:
                total = total + self._phase * self.partial.f1(pair_a) * (
                    c.f1(pair_b)[::-1] * self._E[::-1]
                )
                total = total + self.partial.f2(pair_a, pair_b)
            self._f2[key] = total
        return self._f2[key]

    def g_plus(self, pair_a, pair_b):
        """G+_AB(w) = F1_A(w) F1_B(-w) over the full window."""
        return self.f1(pair_a) * self.f1(pair_b)[::-1]

    def g_minus(self, pair_a, pair_b):
        """G-_AB(w) = F2_AB(w) - F2_BA(-w) over the full window."""
        return self.f2(pair_a, pair_b) - self.f2(pair_b, pair_a)[::-1]


def window_evaluator(schedule, nodes):
    """Single-window evaluator (no repetition bookkeeping)."""
    return FilterEvaluator(CycleCache(schedule, nodes), repetitions=1)


# ----------------------------------------------------------------------
# small-frequency order estimation


def estimate_orders(schedule, points=9, window=(1e-4, 1e-2), round_tol=0.1):
    """Low-frequency scaling exponents |F1_{a,c}| ~ w^k of every entry.

    Fits log|F1| against log w on points spanning `window`/T. Returns a dict
    with per-entry slopes, per-entry rounded orders (None when the slope is
    farther than `round_tol` from an integer), and the sequence order: the
    minimum entry order over nontrivial columns.
    """
    T = float(schedule.duration)
    w_pos = np.logspace(np.log10(window[0] / T), np.log10(window[1] / T), points)
    nodes = symmetric_nodes(w_pos)
    cache = CycleCache(schedule, nodes)
    half = nodes.size // 2
    slopes, orders = {}, {}
    for pair in cache.support_pairs():
        if pair[1] == 0:
            continue
        vals = np.abs(cache.f1(pair)[half:])
        if np.max(vals) == 0.0:
            continue
        slope = float(np.polyfit(np.log(w_pos), np.log(vals), 1)[0])
        slopes[pair] = slope
        k = int(round(slope))
        orders[pair] = k if abs(slope - k) <= round_tol else None
    seq_order = None
    finite = [k for k in orders.values() if k is not None]
    if finite and None not in orders.values():
        seq_order = min(finite)
    return {"slopes": slopes, "orders": orders, "order": seq_order}
