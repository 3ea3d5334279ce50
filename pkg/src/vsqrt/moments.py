"""First moments, the limiting mean A(beta, x0, b), autocovariance and limit checks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .kernels import GridSpec, KernelSpec
from .model import ModelParams
from .resolvents import _tail_gap, _tail_integral, _tail_shape, resolvent_integrals, resolvent_second_kind

MEAN_RTOL = 1e-6
INDEPENDENCE_TOL = 1e-4
NULL_RTOL = 1e-6


def default_limit_grid(kernel: KernelSpec, n_steps=20000):
    """Grid long enough for the resolvent tails of ``kernel`` to be extrapolated."""
    lam = min(c.lam for c in kernel.components)
    T = min(40.0 / lam, 500.0) if lam > 0 else 500.0
    T = max(T, 40.0)
    return GridSpec(T / n_steps, n_steps)


def grid_for(t, step=1e-3):
    """Uniform grid ending exactly at t with step at most ``step``."""
    if not t > 0:
        raise ValidationError("horizon must be positive")
    n = max(1, math.ceil(t / step - 1e-9))
    return GridSpec(t / n, n)


def mean_curve(params: ModelParams, grid: GridSpec, pair=None):
    """E[X_{t_k}] = (I - int_0^t R_beta) x0 + (int_0^t E_beta) b on every node."""
    pair = pair or resolvent_second_kind(params.kernel, params.beta, grid)
    F = pair.E_cumulative  # (n+1, m, m)
    FR = pair.R_cumulative
    return params.x0 - FR @ params.x0 + F @ params.b


def mean_curve_transposed(params: ModelParams, grid: GridSpec, pair_T=None):
    """(I + int (E_{beta^T})^T beta) x0 + (int E_{beta^T})^T b on every node."""
    pair_T = pair_T or resolvent_second_kind(params.kernel, params.beta.T, grid)
    FT = np.swapaxes(pair_T.E_cumulative, 1, 2)
    return params.x0 + FT @ (params.beta @ params.x0) + FT @ params.b


@dataclass
class MeanResult:
    value: np.ndarray
    transposed_form: np.ndarray
    rel_diff: float


def mean_at(params: ModelParams, t, grid: GridSpec | None = None) -> MeanResult:
    """E[X_t] from both first-moment formulas; raises if they disagree."""
    if t == 0:
        x0 = params.x0.copy()
        return MeanResult(x0, x0.copy(), 0.0)
    grid = grid or grid_for(t)
    k = grid.index(t)
    sub = GridSpec(grid.step, k)
    a = mean_curve(params, sub)[-1]
    b = mean_curve_transposed(params, sub)[-1]
    rel = float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-300))
    if rel > MEAN_RTOL and np.max(np.abs(a - b)) > 1e-14:
        raise NumericalError("first-moment formulas disagree", {"rel_diff": rel, "t": t})
    return MeanResult(a, b, rel)


@dataclass
class LimitSummary:
    A: np.ndarray
    R_integral: np.ndarray
    E_integral: np.ndarray
    N_basis: np.ndarray
    P: np.ndarray
    independent_of_x0: bool
    C_beta: float
    R_L1: float
    E_L1: float
    slow_convergence: bool
    window_ratio: float

    def to_dict(self):
        return {
            "A": self.A.tolist(),
            "R_integral": self.R_integral.tolist(),
            "E_integral": self.E_integral.tolist(),
            "N_basis": self.N_basis.tolist(),
            "P": self.P.tolist(),
            "independent_of_x0": self.independent_of_x0,
            "C_beta": self.C_beta,
            "R_L1": self.R_L1,
            "E_L1": self.E_L1,
            "slow_convergence": self.slow_convergence,
            "window_ratio": self.window_ratio,
        }


def null_space_projection(M, rtol=NULL_RTOL, atol=INDEPENDENCE_TOL):
    """Orthonormal basis of ker(M) (columns) and the projector onto its complement.

    Singular values below max(rtol * s_max, atol) count as zero; the absolute
    floor matches the accuracy of the extrapolated resolvent integrals.
    """
    m = M.shape[0]
    _, s, vh = np.linalg.svd(M)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > max(rtol * smax, atol)))
    N = vh[rank:].T.conj()
    P = np.eye(m) - N @ N.T
    P = 0.5 * (P + P.T)
    return N, P


def _l1_norm(values, pair):
    """int_0^inf ||M(t)|| dt (spectral norm) on the grid plus an extrapolated tail."""
    cells = np.abs(pair.E_increments[1:])  # (n, m, m) cell masses of E
    if values is pair.R_values:
        cells = np.abs(np.einsum("kij,jl->kil", pair.E_increments[1:], -pair.B))
    norms = np.linalg.norm(cells, ord=2, axis=(1, 2))
    total = float(norms.sum())
    node = np.linalg.norm(values[1:], ord=2, axis=(1, 2))
    p, rate, fit_rate = _tail_shape(pair.spec, pair.B)
    tail = _tail_integral(node, pair.times[1:], p, rate, fit_rate, _tail_gap(pair.spec))
    return total + float(tail if np.isfinite(tail) else 0.0)


def limit_summary(params: ModelParams, grid: GridSpec | None = None, pair=None) -> LimitSummary:
    """Limiting mean, resolvent integrals, N, P and C_beta."""
    grid = grid or default_limit_grid(params.kernel)
    pair = pair or resolvent_second_kind(params.kernel, params.beta, grid)
    ri = resolvent_integrals(pair)
    if ri.divergent:
        raise NumericalError(
            "E_beta is not integrable; no limiting distribution certified",
            {"window_ratio": ri.window_ratio},
        )
    m = params.m
    RI, EI = ri.R_integral, ri.E_integral
    A = (np.eye(m) - RI) @ params.x0 + EI @ params.b
    N, P = null_space_projection(RI - np.eye(m))
    indep = bool(np.linalg.norm(RI - np.eye(m)) <= INDEPENDENCE_TOL)
    R_L1 = _l1_norm(pair.R_values, pair)
    E_L1 = _l1_norm(pair.E_values, pair)
    C = (1.0 + R_L1) * math.sqrt(m) + E_L1
    return LimitSummary(A, RI, EI, N, P, indep, C, R_L1, E_L1, ri.slow_convergence, ri.window_ratio)


def stationary_autocov(params: ModelParams, lags, grid: GridSpec | None = None, pair=None, summary=None):
    """int_0^inf E(lag + u) sigma(A) sigma(A)^T E(u)^T du for each lag (multiples of h).

    Returns an array of shape (len(lags), m, m).
    """
    grid = grid or default_limit_grid(params.kernel)
    pair = pair or resolvent_second_kind(params.kernel, params.beta, grid)
    summary = summary or limit_summary(params, grid, pair)
    m = params.m
    S = np.diag(params.sigma**2 * np.maximum(summary.A, 0.0))
    h, n = grid.step, grid.n_steps
    E = pair.E_values
    D = pair.E_increments[1:]  # cell masses of E, (n, m, m)
    p, rate, fit_rate = _tail_shape(pair.spec, pair.B)
    out = []
    for lag in np.atleast_1d(lags):
        j = int(round(lag / h))
        if abs(j * h - lag) > 1e-6 * h:
            raise ValidationError(f"lag {lag} is not a multiple of the step {h}")
        if j > n // 2:
            raise ValidationError(f"lag {lag} exceeds half the horizon {grid.horizon}")
        ncell = n - j
        if j == 0:
            mid = D[:ncell] / h
            # first cell: replace the K-part of the self product by its exact square integral
            kint = params.kernel.cell_integral(0.0, h)
            ksq = np.array([c.square_integral(h) for c in params.kernel.components])
        else:
            mid = 0.5 * (E[j : j + ncell] + E[j + 1 : j + ncell + 1])
        body = np.einsum("kij,jl,kml->im", mid, S, D[:ncell])
        if j == 0:
            body += np.diag(np.diag(S) * (ksq - kint**2 / h))
        u = h * np.arange(1, ncell + 1)
        f = np.einsum("kij,jl,kml->kim", E[j + 1 : j + ncell + 1], S, E[1 : ncell + 1])
        tail = _tail_integral(f, u, 2 * p, None if fit_rate else 2 * rate, fit_rate, _tail_gap(pair.spec))
        if not np.all(np.isfinite(tail)):
            tail = np.zeros((m, m))
        out.append(body + tail)
    return np.array(out)


@dataclass
class SufficientConditionReport:
    norm_condition: float
    condition_a: bool
    condition_b: bool
    beta_symmetric: bool
    prediction_a: str
    prediction_b: str
    numeric_R_integral: list
    numeric_integrable: bool
    numeric_identity: bool
    identity_residual: float
    agreement: str

    def to_dict(self):
        return dict(self.__dict__)


def sufficient_condition_checks(params: ModelParams, grid: GridSpec | None = None, pair=None, tol=5e-2):
    """Evaluate the two sufficient conditions and cross-check them numerically.

    (a) ||beta||_2 * sum_j int K_j < 1 predicts an integrable R_beta.
    (b) beta^T beta > 0 and min_j K_j not integrable predicts int R_beta = I.
    For non-symmetric beta under (b) the prediction is reported as undetermined.
    """
    beta = params.beta
    Ktot = params.kernel.total_integrals()
    norm_b = float(np.linalg.norm(beta, 2))
    val = norm_b * float(np.sum(Ktot)) if norm_b > 0 else 0.0
    cond_a = bool(val < 1.0)
    lam_min = float(np.min(np.linalg.eigvalsh(beta.T @ beta)))
    nonint = all(not c.integrable for c in params.kernel.components)
    cond_b = bool(lam_min > 0 and nonint)
    sym = bool(np.allclose(beta, beta.T, atol=1e-14))
    pred_a = "R integrable" if cond_a else "no prediction"
    if cond_b:
        pred_b = "int R = I" if sym else "undetermined"
    else:
        pred_b = "no prediction"
    grid = grid or default_limit_grid(params.kernel)
    pair = pair or resolvent_second_kind(params.kernel, beta, grid)
    ri = resolvent_integrals(pair)
    m = params.m
    if ri.divergent:
        resid = math.inf
        numeric_int = False
    else:
        resid = float(np.linalg.norm(ri.R_integral - np.eye(m)))
        numeric_int = True
    ident = bool(resid <= tol)
    if cond_b and sym:
        agreement = "agree" if ident else "disagree"
    elif cond_a:
        agreement = "agree" if numeric_int else "disagree"
    else:
        agreement = "undetermined"
    return SufficientConditionReport(
        norm_condition=val,
        condition_a=cond_a,
        condition_b=cond_b,
        beta_symmetric=sym,
        prediction_a=pred_a,
        prediction_b=pred_b,
        numeric_R_integral=np.asarray(ri.R_integral).tolist(),
        numeric_integrable=numeric_int,
        numeric_identity=ident,
        identity_residual=resid,
        agreement=agreement,
    )
