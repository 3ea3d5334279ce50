"""Log characteristic functionals of the process and of its stationary limit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import NumericalError, ValidationError
from .kernels import GridSpec
from .model import MeasureForcing, ModelParams
from .moments import default_limit_grid, limit_summary
from .resolvents import resolvent_second_kind
from .riccati import solve_riccati, tail_integrals

FORM_RTOL = 1e-4


def fit_step(offsets, target):
    """Largest step <= target dividing every offset (offsets are rationalised)."""
    fr = [Fraction(float(o)).limit_denominator(10**6) for o in offsets if o > 0]
    if not fr:
        return float(target)
    g = fr[0]
    for f in fr[1:]:
        g = Fraction(math.gcd(g.numerator * f.denominator, f.numerator * g.denominator), g.denominator * f.denominator)
    n = max(1, math.ceil(float(g) / target - 1e-9))
    return float(g) / n



@dataclass
class LogCF:
    """exponent = log E exp(int <X_{t-s}, mu(ds)>) from two independent formulas."""

    exponent: complex
    form_state: complex
    form_mean: complex
    rel_diff: float
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "exponent_re": float(self.exponent.real),
            "exponent_im": float(self.exponent.imag),
            "form_state": [float(self.form_state.real), float(self.form_state.imag)],
            "form_mean": [float(self.form_mean.real), float(self.form_mean.imag)],
            "rel_diff": self.rel_diff,
            "diagnostics": self.diagnostics,
        }


def _rel(a, b):
    scale = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / scale


def _check_forms(a, b, what, diag):
    rel = _rel(a, b)
    if rel > FORM_RTOL:
        diag = dict(diag, rel_diff=rel, form_state=[a.real, a.imag], form_mean=[b.real, b.imag])
        raise NumericalError(f"{what}: the two formulas disagree", diag)
    return rel


class _MeanFunction:
    """m(tau) = x0 + F_beta(tau)(beta x0 + b) at arbitrary tau in [0, T].

    F is interpolated after removing its singular part int_0^tau K.
    """

    def __init__(self, params: ModelParams, grid: GridSpec):
        pair = resolvent_second_kind(params.kernel, params.beta, grid)
        self.params = params
        self.grid = grid
        self.v = params.beta @ params.x0 + params.b
        Fv = pair.E_cumulative @ self.v  # (n+1, m)
        self.Kint = lambda tau: params.kernel.integral(tau) * self.v
        self.smooth = Fv - self.Kint(grid.nodes)
        self.nodes_value = params.x0 + Fv

    def __call__(self, tau):
        tau = np.clip(np.asarray(tau, dtype=float), 0.0, self.grid.horizon)
        out = np.empty(tau.shape + (self.params.m,))
        for i in range(self.params.m):
            out[..., i] = np.interp(tau, self.grid.nodes, self.smooth[:, i])
        return self.params.x0 + out + self.Kint(tau)


def log_cf(params: ModelParams, forcing: MeasureForcing, t, step=5e-4, grid: GridSpec | None = None) -> LogCF:
    """log E exp(int_[0,t] <X_{t-s}, mu(ds)>) for a forcing with Re <= 0."""
    if not t > 0:
        raise ValidationError("t must be positive")
    if grid is None:
        offsets = [s for s, _ in forcing.atoms if s <= t] + [t]
        h = fit_step(offsets, step)
        grid = GridSpec(t / round(t / h), round(t / h))
    if abs(grid.horizon - t) > 1e-9 * t:
        raise ValidationError("grid must end at t")
    kept = tuple((s, u) for s, u in forcing.atoms if s <= t * (1 + 1e-12))
    fc = MeasureForcing(forcing.m, kept, forcing.density, forcing.density_step)
    sol = solve_riccati(params, fc, grid)
    x0, b = params.x0, params.b
    I1, I2 = sol.cell_integrals()
    h = grid.step
    f = fc.density_on(grid)
    fmass = h * (f.sum(axis=0) - 0.5 * (f[0] + f[-1]))
    mass = fmass + sum((u for _, u in kept), np.zeros(params.m, dtype=complex))
    RI = I1 @ params.beta + 0.5 * params.sigma**2 * I2
    form_state = complex(x0 @ mass + x0 @ RI + b @ I1)

    mean = _MeanFunction(params, grid)
    _, W2 = sol.cell_integrals(weight=lambda s: mean(t - s))
    atom_part = sum(complex(mean(t - s) @ u) for s, u in kept)
    mf = mean.nodes_value[::-1] * f  # m(t - s_k) f(s_k)
    dens_part = complex(np.sum(h * (mf.sum(axis=0) - 0.5 * (mf[0] + mf[-1]))))
    form_mean = complex(atom_part + dens_part + 0.5 * params.sigma**2 @ W2)

    diag = {
        "step": h,
        "n_steps": grid.n_steps,
        "riccati_residual": sol.residual,
        "near_cells": int(len(sol.near_cells)),
        "max_re_psi": float(np.max(sol.psi.real)),
    }
    rel = _check_forms(form_state, form_mean, "log characteristic function", diag)
    diag["rel_diff"] = rel
    return LogCF(form_state, form_state, form_mean, rel, diag)


def _limit_forms(params, forcing, grid, summary, what):
    sol = solve_riccati(params, forcing, grid)
    ts = tail_integrals(sol)
    x0, b, A = params.x0, params.b, summary.A
    mass = forcing.total_mass()
    form_state = complex(x0 @ mass + x0 @ ts.R_integral + b @ ts.psi_integral)
    form_mean = complex(A @ mass + 0.5 * (params.sigma**2 * A) @ ts.psi_sq_integral)
    diag = {
        "step": grid.step,
        "horizon": grid.horizon,
        "window_ratio": ts.window_ratio,
        "tail_converged": ts.converged,
        "riccati_residual": sol.residual,
        "A": A.tolist(),
    }
    rel = _check_forms(form_state, form_mean, what, diag)
    diag["rel_diff"] = rel
    return LogCF(form_mean, form_state, form_mean, rel, diag)


def limit_log_laplace(params: ModelParams, u, grid: GridSpec | None = None, summary=None) -> LogCF:
    """lim_t log E exp(<X_t, u>) for Re u <= 0."""
    grid = grid or default_limit_grid(params.kernel)
    summary = summary or limit_summary(params, grid)
    u = np.atleast_1d(np.asarray(u, dtype=complex))
    if u.size == 1 and params.m > 1:
        u = np.full(params.m, u[0])
    forcing = MeasureForcing(params.m, ((0.0, u),))
    return _limit_forms(params, forcing, grid, summary, "limit log-Laplace transform")


def stationary_fdd_log_cf(params: ModelParams, times, weights, step=None, horizon=None, summary=None) -> LogCF:
    """log E exp(sum_j <Y_{t_j}, u_j>) for the stationary limit Y.

    Uses mu = sum_j u_j delta_{t_n - t_j}; the exponent is
    sum_j <A, u_j> + sum_i sigma_i^2/2 A_i int_0^inf psi_i^2.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValidationError("times must be a non-empty list")
    if np.any(np.diff(times) < 0):
        raise ValidationError("times must be nondecreasing")
    W = np.asarray(weights, dtype=complex)
    if W.ndim == 1:
        W = W[:, None] * np.ones(params.m)
    if W.shape != (times.size, params.m):
        raise ValidationError(f"weights must have shape ({times.size}, {params.m})")
    base = default_limit_grid(params.kernel)
    offsets = times[-1] - times
    h = fit_step(list(offsets), step or base.step)
    T = max(horizon or base.horizon, 4 * float(offsets.max()))
    grid = GridSpec(h, math.ceil(T / h - 1e-9))
    summary = summary or limit_summary(params, base)
    forcing = MeasureForcing(params.m, tuple((float(o), W[j]) for j, o in enumerate(offsets)))
    return _limit_forms(params, forcing, grid, summary, "stationary characteristic function")
