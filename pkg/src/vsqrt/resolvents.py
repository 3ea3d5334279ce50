"""Resolvent of the second kind R_B and the kernel E_B = K - R_B * K on a grid.

The march works with the cumulative integral F(t) = int_0^t E_B, which solves

    F = K1 + K * (B F),     K1(t) = int_0^t K,

with exact kernel cell masses and the endpoint average of F on each cell.
The recursion is run on the cell increments D_k = F_k - F_{k-1} (same
weights, forcing h kappa_k) so that small late increments keep full relative
precision.  Forcing and convolution weights come from the same sequence of
cell masses, so the discrete solution inherits E_B(-B) = R_B and
E_beta = (E_beta^T)^T exactly (up to rounding).  Nodal values follow from
E = K + K * (B dF).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg

from .errors import NumericalError, ValidationError
from .kernels import GridSpec, KernelSpec, ml_e


def cell_masses(spec: KernelSpec, grid: GridSpec):
    """kappa[d, i] = (1/h) int_{(d-1)h}^{dh} K_i for d = 1..n, kappa[0] = 0."""
    h, n = grid.step, grid.n_steps
    d = np.arange(1, n + 1)
    kap = np.zeros((n + 1, spec.m))
    kap[1:] = spec.cell_integral((d - 1) * h, d * h) / h
    return kap


def _nodal_kernel(spec: KernelSpec, grid: GridSpec):
    """K_i(t_k) with NaN where the kernel is singular at t = 0."""
    t = grid.nodes
    vals = np.empty((t.size, spec.m))
    vals[1:] = spec.eval(t[1:])
    vals[0] = [np.nan if c.singular else float(c.eval(0.0)) for c in spec.components]
    return vals


def _march_increments(kap, B, h):
    """Cell increments D_k of F_k = K1_k + (h/2) sum_c kappa_{k-c} B (F_c + F_{c+1}).

    D obeys the same recursion with forcing h kappa_k and D_0 = 0.
    """
    n = kap.shape[0] - 1
    m = B.shape[0]
    force = h * kap
    omega = 0.5 * h * (kap[1:n] + kap[2 : n + 1])  # omega[d-1], d = 1..n-1
    omega_rev = omega[::-1].copy()
    lhs = np.eye(m) - 0.5 * h * kap[1][:, None] * B
    cond = np.linalg.cond(lhs)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError("diagonal step system is singular; reduce the step", {"step": h, "cond": cond})
    lu = linalg.lu_factor(lhs)
    D = np.zeros((n + 1, m, m))
    G = np.zeros((n + 1, m, m))  # G_j = B D_j
    if m == 1:
        b = float(B[0, 0])
        g = G[:, 0, 0]
        d = D[:, 0, 0]
        denom = lhs[0, 0]
        w = omega_rev[:, 0]
        for k in range(1, n + 1):
            conv = np.dot(w[n - k :], g[1:k]) if k > 1 else 0.0
            d[k] = (force[k, 0] + conv) / denom
            g[k] = b * d[k]
        return D
    for k in range(1, n + 1):
        rhs = np.diag(force[k]).astype(float)
        if k > 1:
            w = omega_rev[n - k :]  # (k-1, m), aligned with j = 1..k-1
            for i in range(m):
                rhs[i] += w[:, i] @ G[1:k, i, :]
        D[k] = linalg.lu_solve(lu, rhs)
        G[k] = B @ D[k]
    return D


def _nodal_values(spec, grid, kap, B, incr):
    """E(t_k) = K(t_k) + sum_{c<k} kappa_{k-c} B D_{c+1}."""
    n, m = grid.n_steps, spec.m
    D = np.einsum("ij,cjl->cil", B, incr[1:])  # (n, m, m)
    Kn = _nodal_kernel(spec, grid)
    E = np.zeros((n + 1, m, m))
    for i in range(m):
        E[:, i, i] = Kn[:, i]
        for l in range(m):
            if not np.any(D[:, i, l]):
                continue
            conv = np.convolve(kap[:, i], D[:, i, l])[: n + 1]
            E[1:, i, l] += conv[1:]
    return E


def _tail_shape(spec: KernelSpec, B):
    """Asymptotic profile t -> t^-p exp(-r t) used for tail extrapolation."""
    comps = spec.components
    lam = min(c.lam for c in comps)
    slow = [c for c in comps if c.lam == lam]
    H = min(c.H for c in slow)
    if H < 0.5:
        return H + 1.5, lam, False
    return 0.0, None, True  # exponential rate fitted from data


def _tail_integral(values, t, p, rate, fit_rate, gap=None):
    """Extrapolated int_T^inf of each entry, fitting over the last decade.

    With ``gap`` the power-law fit uses t^-p and t^-(p+gap) jointly.
    """
    T = t[-1]
    sel = t >= T / 10.0
    if not fit_rate and rate:
        sel &= rate * (T - t) <= 50.0  # keep the exponential basis representable
    ts, vs = t[sel], values[sel]
    scale = np.max(np.abs(values[1:]), axis=0)
    out = np.zeros(values.shape[1:])
    powers = [p] if gap is None or fit_rate else [p, p + gap]
    if not fit_rate:
        basis = np.stack([(ts / T) ** -q * np.exp(-rate * (ts - T)) for q in powers], axis=1)
        tails = [
            integrate.quad(lambda x, q=q: (x / T) ** -q * math.exp(-rate * (x - T)), T, np.inf, limit=200)[0]
            for q in powers
        ]
    for idx in np.ndindex(out.shape):
        v = vs[(slice(None),) + idx]
        if scale[idx] == 0 or np.max(np.abs(v)) < 1e-13 * scale[idx]:
            continue
        if fit_rate:
            pos = v[np.abs(v) > 1e-300]
            tt = ts[np.abs(v) > 1e-300]
            if pos.size < 3 or np.any(np.sign(pos) != np.sign(pos[-1])):
                continue
            slope, icpt = np.polyfit(tt, np.log(np.abs(pos)), 1)
            if slope >= 0:
                out[idx] = np.inf * np.sign(pos[-1])
                continue
            r = -slope
            out[idx] = np.sign(pos[-1]) * math.exp(icpt - r * T) / r
            continue
        coef = np.linalg.lstsq(basis, v, rcond=None)[0]
        out[idx] = float(np.dot(coef, tails))
    return out


def _tail_gap(spec: KernelSpec):
    """Spacing of the power-law tail expansion, alpha = H + 1/2 of the slowest component."""
    lam = min(c.lam for c in spec.components)
    return min(c.H for c in spec.components if c.lam == lam) + 0.5


@dataclass
class ResolventPair:
    """Grid samples of R_B and E_B with cumulative integrals and tail summaries."""

    grid: GridSpec
    B: np.ndarray
    spec: KernelSpec
    R_values: np.ndarray
    E_values: np.ndarray
    E_cumulative: np.ndarray
    R_cumulative: np.ndarray
    tail: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.grid.nodes

    E_increments: np.ndarray = None

    def E_cell_averages(self):
        return self.E_increments[1:] / self.grid.step

    def to_csv(self):
        m = self.B.shape[0]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["t"] + [f"R[{i}][{j}]" for i in range(m) for j in range(m)]
        header += [f"E[{i}][{j}]" for i in range(m) for j in range(m)]
        w.writerow(header)
        for k, t in enumerate(self.times):
            row = [repr(float(t))]
            row += [repr(float(x)) for x in self.R_values[k].ravel()]
            row += [repr(float(x)) for x in self.E_values[k].ravel()]
            w.writerow(row)
        return buf.getvalue()


def resolvent_second_kind(spec: KernelSpec, B, grid: GridSpec) -> ResolventPair:
    """Compute R_B and E_B for K_B = -K B on ``grid``."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape != (spec.m, spec.m):
        raise ValidationError(f"B must be {spec.m}x{spec.m}")
    if not np.all(np.isfinite(B)):
        raise ValidationError("B must be finite")
    kap = cell_masses(spec, grid)
    incr = _march_increments(kap, B, grid.step)
    F = np.cumsum(incr, axis=0)
    E = _nodal_values(spec, grid, kap, B, incr)
    R = -np.einsum("kij,jl->kil", E, B)
    FR = -np.einsum("kij,jl->kil", F, B)
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(E[1:]))):
        raise NumericalError("resolvent march produced non-finite values", {"step": grid.step})
    return ResolventPair(grid, B, spec, R, E, F, FR, E_increments=incr)


@dataclass
class ResolventIntegrals:
    R_integral: np.ndarray
    E_integral: np.ndarray
    R_partial: np.ndarray
    E_partial: np.ndarray
    E_tail: np.ndarray
    window_ratio: float
    integrable: bool
    slow_convergence: bool
    divergent: bool = False

    def to_dict(self):
        return {
            "R_integral": self.R_integral.tolist(),
            "E_integral": self.E_integral.tolist(),
            "R_partial": self.R_partial.tolist(),
            "E_partial": self.E_partial.tolist(),
            "E_tail": self.E_tail.tolist(),
            "window_ratio": self.window_ratio,
            "integrable": self.integrable,
            "slow_convergence": self.slow_convergence,
            "divergent": self.divergent,
        }


def resolvent_integrals(pair: ResolventPair, window_tol=1e-6) -> ResolventIntegrals:
    """int_0^inf R_B and E_B: grid integral plus an extrapolated tail.

    The trailing window [T/2, T] must carry less than ``window_tol`` of the
    total mass for the pair to count as integrable without extrapolation.
    If the window mass does not shrink relative to [T/4, T/2], E_B is
    flagged divergent and the integrals are NaN.
    """
    t = pair.times
    n = pair.grid.n_steps
    FE = pair.E_cumulative
    E_partial = FE[-1]
    window = FE[-1] - FE[n // 2]
    before = FE[n // 2] - FE[n // 4]
    denom = max(np.linalg.norm(E_partial), 1e-300)
    ratio = float(np.linalg.norm(window) / denom)
    shrink = np.linalg.norm(window) / max(np.linalg.norm(before), 1e-300)
    divergent = bool(ratio > window_tol and shrink >= 0.9)
    if not divergent:
        p, rate, fit_rate = _tail_shape(pair.spec, pair.B)
        E_tail = _tail_integral(pair.E_values[1:], t[1:], p, rate, fit_rate, _tail_gap(pair.spec))
        divergent = not np.all(np.isfinite(E_tail))
    if divergent:
        E_tail = np.full_like(E_partial, np.nan)
    E_int = E_partial + E_tail
    R_int = -E_int @ pair.B
    integrable = ratio < window_tol
    return ResolventIntegrals(
        R_integral=R_int,
        E_integral=E_int,
        R_partial=-E_partial @ pair.B,
        E_partial=E_partial,
        E_tail=E_tail,
        window_ratio=ratio,
        integrable=integrable,
        slow_convergence=not integrable and not divergent,
        divergent=divergent,
    )


def closed_form_E_fractional(H, lam, beta, t):
    """E_beta(t) for m = 1 and beta < 0 via the Mittag-Leffler function."""
    if not beta < 0:
        raise ValidationError("closed form needs beta < 0")
    t = np.asarray(t, dtype=float)
    if H < 0.5 and np.any(t <= 0):
        raise ValidationError("closed form needs t > 0 for H < 1/2")
    a = H + 0.5
    mag = abs(beta)
    out = mag ** (-1.0 + 1.0 / a) * np.exp(-lam * t) * ml_e(a, mag ** (1.0 / a) * t)
    return out[()] if np.ndim(out) == 0 else out
