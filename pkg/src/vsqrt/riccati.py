"""Riccati-Volterra equation psi = K * (mu + R(psi)) for measure forcings.

The solution is split as psi = Phi + chi where Phi(t) = sum_{s_a < t} K(t - s_a) u_a
is the exact (possibly singular) response to the atoms and chi = K * (f + R(psi))
is continuous.  chi is marched with an implicit product trapezoid rule whose
weights are exact kernel moments.  Cells within ``NEAR_CELLS`` steps after an
atom are integrated with Gauss-Jacobi rules matched to the power singularities
of Phi, Phi^2 and the kernel, using the exact Phi and a linear chi.

The history sum over ordinary cells is a fixed-weight discrete convolution; it
is evaluated directly within the current block and by FFT once a block of
cells is complete.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import signal, special

from .errors import NumericalError, ValidationError
from .kernels import GridSpec, KernelSpec
from .model import MeasureForcing, ModelParams, quadratic_map
from .resolvents import _tail_gap, _tail_integral

NEAR_CELLS = 32
EXACT_REACH = 64
BLOCK = 128
BLOWUP = 1e8
RULE_POINTS = 10
MAX_EXPANSION = 12

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def _key(p):
    return round(float(p), 9)


@lru_cache(maxsize=None)
def _rule(pl, pr, n=RULE_POINTS):
    """Nodes y in (0, 1) and weights for G(y) ~ y^pl (1-y)^pr * smooth.

    The weights already divide out the singular factor, so sum w G(y)
    approximates int_0^1 G(y) dy.
    """
    if pl == 0.0 and pr == 0.0:
        x, w = np.polynomial.legendre.leggauss(n)
        return 0.5 * (x + 1.0), 0.5 * w
    with np.errstate(invalid="ignore", divide="ignore"):
        # scipy evaluates a discarded branch that is undefined when pl + pr < -1
        x, w = special.roots_jacobi(n, pr, pl)
    y = 0.5 * (x + 1.0)
    w = w * 2.0 ** (-(1.0 + pl + pr)) / (y**pl * (1.0 - y) ** pr)
    return y, w


class Graded(dict):
    """Sum of terms x^p * smooth keyed by the exponent p at the cell start.

    Values are callables mapping local coordinates y in (0, 1) of the cell,
    shape (q,), to (q, m) complex arrays; x = h y and the singular factor is
    included in the value.
    """

    def add(self, other):
        out = Graded(self)
        for p, f in other.items():
            if p in out:
                g = out[p]
                out[p] = lambda y, f=f, g=g: g(y) + f(y)
            else:
                out[p] = f
        return out

    def mul(self, other):
        out = Graded()
        for p, f in self.items():
            for q, g in other.items():
                out = out.add(Graded({_key(p + q): (lambda y, f=f, g=g: f(y) * g(y))}))
        return out

    def matmul(self, M):
        return Graded({p: (lambda y, f=f: f(y) @ M) for p, f in self.items()})

    def scale(self, v):
        return Graded({p: (lambda y, f=f: f(y) * v) for p, f in self.items()})


def _kernel_values(spec: KernelSpec, r):
    """K_i(r) for r > 0 of any shape; returns r.shape + (m,)."""
    r = np.asarray(r, dtype=float)
    out = np.empty(r.shape + (spec.m,))
    for i, c in enumerate(spec.components):
        a = c.alpha
        v = np.exp(-c.lam * r) / special.gamma(a)
        if a != 1.0:
            v = v * r ** (a - 1.0)
        out[..., i] = v
    return out


def trapezoid_weights(spec: KernelSpec, grid: GridSpec):
    """Product trapezoid weights W0[d], W1[d], d = 0..n (W[0] = 0).

    int over the cell at distance d of K(t_k - s) g(s) ds with g linear equals
    W0[d] g(left) + W1[d] g(right).
    """
    h, n = grid.step, grid.n_steps
    W0 = np.zeros((n + 1, spec.m))
    W1 = np.zeros((n + 1, spec.m))
    # first cell: exact moments of the singular kernel
    mass = spec.cell_integral(0.0, h)
    mom = spec.first_moment(0.0, h)
    W0[1] = mom / h
    W1[1] = mass - mom / h
    if n >= 2:
        d = np.arange(2, n + 1)
        # r = (d - 1 + y) h, y in [0, 1]; g(left) <-> weight y, g(right) <-> 1 - y
        y = 0.5 * (_GL_X + 1.0)
        r = h * (d[:, None] - 1.0 + y[None, :])
        K = _kernel_values(spec, r)  # (n-1, q, m)
        w = 0.5 * _GL_W * h
        W0[2:] = np.einsum("q,dqm->dm", w * y, K)
        W1[2:] = np.einsum("q,dqm->dm", w * (1.0 - y), K)
    return W0, W1


@dataclass
class NearCell:
    """Data to rebuild the graded solution on a cell that follows an event."""

    c: int
    chi_left: np.ndarray
    chi_right: np.ndarray


class _Engine:
    """Generic march for Y = Phi + chi, chi = K * g(Y) with explicit atom part Phi.

    Events are atoms of Y, extra nodes where g is singular (``problem.extra_near``)
    and t = 0.  After each event chi behaves like sum_j c_j x^(gamma_j) plus a
    smooth function; the leading terms are read off from g and added to the
    linear interpolation of chi on the following cells.
    """

    def __init__(self, spec: KernelSpec, grid: GridSpec, atoms: dict, problem):
        self.spec, self.grid = spec, grid
        self.m, self.h, self.n = spec.m, grid.step, grid.n_steps
        self.atoms = {k: np.asarray(u, dtype=complex) for k, u in atoms.items() if 0 <= k < self.n}
        self.problem = problem
        self.alphas = np.array([c.alpha for c in spec.components])
        self.W0, self.W1 = trapezoid_weights(spec, grid)
        self._atom_idx = np.array(sorted(self.atoms), dtype=int)
        self._atom_u = (
            np.array([self.atoms[k] for k in self._atom_idx]) if self.atoms else np.zeros((0, self.m), complex)
        )
        self.Phi = self._phi_nodes()
        events = {0} | set(self.atoms) | {int(k) for k in problem.extra_near if 0 <= k < self.n}
        self.events = sorted(events)
        near = np.zeros(self.n, dtype=bool)
        for k in self.events:
            near[k : min(self.n, k + NEAR_CELLS)] = True
        self.near = near
        self.corr = {}

    # -- explicit atom part -------------------------------------------------
    def _phi_nodes(self):
        """Phi at nodes with the half-open convention (atom at t excluded)."""
        out = np.zeros((self.n + 1, self.m), dtype=complex)
        t = self.grid.nodes
        for k, u in self.atoms.items():
            r = t[k + 1 :] - t[k]
            out[k + 1 :] += _kernel_values(self.spec, r) * u
        return out

    def phi_other(self, c, y):
        """Atoms strictly before the cell start t_c, at local coordinates y."""
        sel = self._atom_idx < c
        if not np.any(sel):
            return np.zeros((y.size, self.m), dtype=complex)
        r = self.h * ((c - self._atom_idx[sel])[None, :] + y[:, None])
        K = _kernel_values(self.spec, r)  # (q, A, m)
        return np.einsum("qam,am->qm", K, self._atom_u[sel])

    def _corr_value(self, e, x):
        """Singular correction of event e at distances x >= 0, shape (q, m)."""
        out = np.zeros((x.size, self.m), dtype=complex)
        for gam, vec in self.corr.get(e, ()):
            out += (x**gam)[:, None] * vec
        return out

    def graded_Y(self, c, chi_l, chi_r):
        """Graded representation of Y on the cell [t_c, t_{c+1}]."""
        h = self.h
        prior = [e for e in self.events if e < c and c - e < NEAR_CELLS and e in self.corr]
        own = self.corr.get(c, ()) if c in self.events else ()

        def smooth(y, chi_l=chi_l, chi_r=chi_r):
            yy = y[:, None]
            out = self.phi_other(c, y) + chi_l * (1.0 - yy) + chi_r * yy
            for e in prior:
                x0, x1 = (c - e) * h, (c - e + 1) * h
                v = self._corr_value(e, h * ((c - e) + y))
                v0 = self._corr_value(e, np.array([x0]))
                v1 = self._corr_value(e, np.array([x1]))
                out += v - v0 * (1.0 - yy) - v1 * yy
            if own:
                v1 = self._corr_value(c, np.array([h]))
                out -= v1 * yy
            return out

        G = Graded({0.0: smooth})
        for gam, vec in own:
            G = G.add(Graded({_key(gam): (lambda y, gam=gam, vec=vec: ((h * y) ** gam)[:, None] * vec)}))
        u = self.atoms.get(c)
        if u is not None:
            for a in np.unique(self.alphas):
                ua = u * (self.alphas == a)

                def sing(y, ua=ua):
                    return _kernel_values(self.spec, h * y) * ua

                G = G.add(Graded({_key(a - 1.0): sing}))
        return G

    def _set_corrections(self, e, chi_e):
        """Leading singular terms of chi after event e from the x -> 0 limit of g.

        chi ~ K * (leading terms of g); the terms of chi feed back into g, so
        the expansion is iterated until its exponents stop changing. For very
        rough kernels some exponents are negative (chi itself is singular).
        """
        self.corr[e] = []
        for _ in range(MAX_EXPANSION):
            terms = self._expansion(e, chi_e)
            new = [(g, v) for g, v in sorted(terms.items()) if np.any(v) and g != 0.0]
            same = len(new) == len(self.corr[e]) and all(
                g0 == g1 and np.allclose(v0, v1, rtol=1e-12, atol=0) for (g0, v0), (g1, v1) in zip(new, self.corr[e])
            )
            self.corr[e] = new
            if same:
                break

    def _expansion(self, e, chi_e):
        G = self.problem.g_graded(e, self.graded_Y(e, chi_e, chi_e))
        eps = 1e-9
        x = self.h * eps
        terms = {}
        for p, f in G.items():
            val = f(np.array([eps]))[0] / x**p
            if p == 0.0 and e != 0:
                # only the part created by products of singular terms is new at e
                val = val - self.problem.g_nodal(e, self.Phi[e] + chi_e)
                if np.max(np.abs(val)) <= 1e-9 * (1.0 + np.max(np.abs(f(np.array([eps]))[0]))):
                    continue
            for i, a in enumerate(self.alphas):
                gam = _key(p + a)
                if gam >= 2.0 or val[i] == 0:
                    continue
                coef = val[i] * math.exp(special.gammaln(p + 1.0) - special.gammaln(p + 1.0 + a))
                vec = terms.setdefault(gam, np.zeros(self.m, dtype=complex))
                vec[i] += coef
        return terms

    # -- quadrature over a near cell ---------------------------------------
    def _moments(self, G):
        """(int g, int g*y) over a cell for graded g."""
        h = self.h
        M0 = np.zeros(self.m, dtype=complex)
        M1 = np.zeros(self.m, dtype=complex)
        for p, f in G.items():
            y, w = _rule(p, 0.0)
            v = f(y)
            M0 += h * (w @ v)
            M1 += h * ((w * y) @ v)
        return M0, M1

    def _against_kernel(self, G, c, ks):
        """int_cell K(t_k - s) g(s) ds for target indices ks (all >= c + 2)."""
        h = self.h
        out = np.zeros((ks.size, self.m), dtype=complex)
        for p, f in G.items():
            y, w = _rule(p, 0.0)
            v = f(y)
            K = _kernel_values(self.spec, h * ((ks - c)[:, None] - y[None, :]))  # (nk, q, m)
            out += h * np.einsum("q,kqm,qm->km", w, K, v)
        return out

    def _last_cell(self, G):
        """int over a cell of K(t_{c+1} - s) g(s) ds (kernel singular at the right end)."""
        h = self.h
        out = np.zeros(self.m, dtype=complex)
        for a in np.unique(self.alphas):
            cols = np.flatnonzero(self.alphas == a)
            for p, f in G.items():
                y, w = _rule(p, _key(a - 1.0))
                v = f(y)[:, cols]
                K = _kernel_values(self.spec, h * (1.0 - y))[:, cols]
                out[cols] += h * np.einsum("q,qm,qm->m", w, K, v)
        return out

    # -- march ---------------------------------------------------------------
    def run(self):
        n, m, h = self.n, self.m, self.h
        W0, W1 = self.W0, self.W1
        W0r, W1r = W0[::-1].copy(), W1[::-1].copy()
        prob = self.problem
        chi = np.zeros((n + 1, m), dtype=complex)
        gnode = np.zeros((n + 1, m), dtype=complex)
        gl = np.zeros((n + 1, m), dtype=complex)
        gr = np.zeros((n + 1, m), dtype=complex)
        acc = np.zeros((n + 2, m), dtype=complex)
        near_cells = {}
        defect = np.zeros(n + 1)
        gnode[0] = prob.g_nodal(0, self.Phi[0] + chi[0])
        events = set(self.events)
        bs = 0
        for k in range(1, n + 1):
            c = k - 1
            H = acc[k].copy()
            if k - 2 >= bs:
                lo, hi = n - k + bs, n - 1
                H += np.sum(W0r[lo:hi] * gl[bs : k - 1] + W1r[lo:hi] * gr[bs : k - 1], axis=0)
            if not self.near[c]:
                H += W0[1] * gnode[c]
                chi[k], defect[k] = prob.solve_regular(k, H, W1[1], self.Phi[k], chi[c])
                gl[c], gnode[k] = gnode[c], prob.g_nodal(k, self.Phi[k] + chi[k])
                gr[c] = gnode[k]
            else:
                if c in events:
                    self._set_corrections(c, chi[c])
                chi[k], defect[k] = self._solve_near(c, H, chi[c])
                gnode[k] = prob.g_nodal(k, self.Phi[k] + chi[k])
                G = prob.g_graded(c, self.graded_Y(c, chi[c], chi[k]))
                M0, M1 = self._moments(G)
                gl[c] = (4.0 * M0 - 6.0 * M1) / h
                gr[c] = (6.0 * M1 - 2.0 * M0) / h
                hi = min(n, c + EXACT_REACH)
                if hi >= c + 2:
                    ks = np.arange(c + 2, hi + 1)
                    d = ks - c
                    exact = self._against_kernel(G, c, ks)
                    acc[ks] += exact - (W0[d] * gl[c] + W1[d] * gr[c])
                near_cells[c] = NearCell(c, chi[c].copy(), chi[k].copy())
            y = self.Phi[k] + chi[k]
            if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > BLOWUP:
                raise NumericalError(
                    "solution exceeded the blow-up guard",
                    {"step": k, "time": k * h, "max_abs": float(np.max(np.abs(y)))},
                )
            if k - bs >= BLOCK and k < n:
                self._flush(gl, gr, acc, bs, k)
                bs = k
        return chi, near_cells, defect

    def _flush(self, gl, gr, acc, bs, k):
        n = self.n
        L = n - bs + 1
        for i in range(self.m):
            y0 = signal.oaconvolve(gl[bs:k, i], self.W0[:L, i])
            y1 = signal.oaconvolve(gr[bs:k, i], self.W1[:L, i])
            acc[k + 1 : n + 1, i] += (y0 + y1)[k - bs + 1 : n - bs + 1]

    def _solve_near(self, c, H, chi_prev):
        """Newton on chi_k = H + int_cell K(t_k - s) g(s; chi_k) ds."""
        prob = self.problem

        def F(x):
            G = prob.g_graded(c, self.graded_Y(c, chi_prev, x))
            return x - H - self._last_cell(G)

        x = chi_prev.copy()
        fx = F(x)
        for _ in range(50):
            scale = 1.0 + np.max(np.abs(x))
            eps = 1e-7 * scale
            J = np.empty((self.m, self.m), dtype=complex)
            for l in range(self.m):
                e = np.zeros(self.m, dtype=complex)
                e[l] = eps
                J[:, l] = (F(x + e) - fx) / eps
            try:
                dx = np.linalg.solve(J, -fx)
            except np.linalg.LinAlgError as exc:
                raise NumericalError("singular Newton system", {"cell": c}) from exc
            x = x + dx
            fx = F(x)
            if np.max(np.abs(fx)) <= 1e-14 * scale:
                break
        return x, float(np.max(np.abs(fx)))


class _RiccatiProblem:
    linear = False
    extra_near = ()

    def __init__(self, params: ModelParams, f_nodes):
        self.params = params
        self.beta = params.beta
        self.s2 = params.sigma**2
        self.f = f_nodes

    def g_nodal(self, k, y):
        return self.f[k] + y @ self.beta + 0.5 * self.s2 * y * y

    def solve_regular(self, k, H, w, phi, chi_prev):
        """chi = H + w g(phi + chi); closed form for m = 1, Newton otherwise."""
        f = self.f[k]
        if self.beta.shape[0] == 1:
            a = -0.5 * w[0] * self.s2[0]
            b = 1.0 - w[0] * self.beta[0, 0]
            c = -(phi[0] + H[0] + w[0] * f[0])
            if a == 0.0:
                y = -c / b
            else:
                y = -2.0 * c / (b + np.sqrt(b * b - 4.0 * a * c))
            return np.array([y - phi[0]]), 0.0
        x = chi_prev.copy()
        for _ in range(50):
            y = phi + x
            r = x - H - w * self.g_nodal(k, y)
            J = np.eye(y.size) - w[:, None] * (self.beta.T + np.diag(self.s2 * y))
            dx = np.linalg.solve(J, -r)
            x = x + dx
            if np.max(np.abs(dx)) <= 1e-15 * (1.0 + np.max(np.abs(x))):
                break
        y = phi + x
        return x, float(np.max(np.abs(x - H - w * self.g_nodal(k, y))))

    def f_graded(self, c, h):
        fl, fr = self.f[c], self.f[c + 1]
        return Graded({0.0: lambda y: fl * (1.0 - y[:, None]) + fr * y[:, None]})

    def g_graded(self, c, Y):
        h = self.h
        out = self.f_graded(c, h).add(Y.matmul(self.beta))
        return out.add(Y.mul(Y).scale(0.5 * self.s2))


class _LinearizedProblem(_RiccatiProblem):
    """g(D) = f_nu + beta^T D + diag(sigma^2 psi) D around a base solution."""

    linear = True

    def __init__(self, params, f_nodes, base: "RiccatiSolution"):
        super().__init__(params, f_nodes)
        self.base = base
        self.extra_near = tuple(base.atom_indices)

    def g_nodal(self, k, y):
        return self.f[k] + y @ self.beta + self.s2 * self.base.psi[k] * y

    def solve_regular(self, k, H, w, phi, chi_prev):
        psi = self.base.psi[k]
        J = np.eye(phi.size) - w[:, None] * (self.beta.T + np.diag(self.s2 * psi))
        rhs = H + w * (self.f[k] + phi @ self.beta + self.s2 * psi * phi)
        x = np.linalg.solve(J, rhs)
        return x, 0.0

    def g_graded(self, c, Y):
        h = self.h
        P = self.base.graded_psi(c)
        out = self.f_graded(c, h).add(Y.matmul(self.beta))
        return out.add(P.mul(Y).scale(self.s2))


@dataclass
class RiccatiSolution:
    """psi(t_k, mu) at grid nodes (atoms at t_k excluded) plus cell data."""

    params: ModelParams
    forcing: MeasureForcing
    grid: GridSpec
    psi: np.ndarray
    chi: np.ndarray
    atoms: dict
    near_cells: dict
    residual: float
    engine: _Engine = field(repr=False, default=None)
    tail: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.grid.nodes

    @property
    def atom_indices(self):
        return sorted(self.engine.atoms)

    def graded_psi(self, c):
        """Graded psi on cell c (valid for any cell of the grid)."""
        return self.engine.graded_Y(c, self.chi[c], self.chi[c + 1])

    def cell_integrals(self, weight=None, upto=None):
        """(int w psi, int w psi^2) over [0, t_upto], componentwise.

        ``weight`` maps an array of times (q,) to (q,) or (q, m) values and
        must be smooth on every cell.
        """
        n = self.grid.n_steps if upto is None else int(upto)
        h = self.grid.step
        t = self.times[: n + 1]
        wn = np.ones((n + 1, 1)) if weight is None else _as2d(weight(t))
        p = self.psi[: n + 1]
        f1 = wn * p
        f2 = wn * p * p
        cell1 = 0.5 * h * (f1[:-1] + f1[1:])
        cell2 = 0.5 * h * (f2[:-1] + f2[1:])
        for c in self.engine_near(n):
            P = self.graded_psi(c)
            for arr, G in ((cell1, P), (cell2, P.mul(P))):
                arr[c] = _integrate_graded(G, c * h, h, weight, self.params.m)
        return cell1.sum(axis=0), cell2.sum(axis=0)

    def norm_integrals(self):
        """(int_0^T |psi|, int_0^T |psi|^2) with the Euclidean norm."""
        h = self.grid.step
        a = np.linalg.norm(self.psi, axis=-1)
        c1 = 0.5 * h * (a[:-1] + a[1:])
        c2 = 0.5 * h * (a[:-1] ** 2 + a[1:] ** 2)
        for c in self.engine_near(self.grid.n_steps):
            P = self.graded_psi(c)
            y, w = _rule(min(P), 0.0)
            v = np.linalg.norm(sum(f(y) for f in P.values()), axis=-1)
            c1[c] = h * (w @ v)
            c2[c] = h * (w @ v**2)
        return float(c1.sum()), float(c2.sum())

    def engine_near(self, n):
        return [c for c in np.flatnonzero(self.engine.near[:n])]

    def cumulative_integrals(self):
        """Running int_0^{t_k} psi and psi^2 at every node, shape (n+1, m) each."""
        n, h = self.grid.n_steps, self.grid.step
        p = self.psi
        cell1 = 0.5 * h * (p[:-1] + p[1:])
        cell2 = 0.5 * h * (p[:-1] ** 2 + p[1:] ** 2)
        for c in self.engine_near(n):
            P = self.graded_psi(c)
            cell1[c] = _integrate_graded(P, c * h, h, None, self.params.m)
            cell2[c] = _integrate_graded(P.mul(P), c * h, h, None, self.params.m)
        z = np.zeros((1, self.params.m), dtype=complex)
        return np.vstack([z, np.cumsum(cell1, axis=0)]), np.vstack([z, np.cumsum(cell2, axis=0)])

    def to_csv(self):
        m = self.params.m
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"re_psi[{i}]" for i in range(m)] + [f"im_psi[{i}]" for i in range(m)])
        for k, t in enumerate(self.times):
            row = [repr(float(t))]
            row += [repr(float(z.real)) for z in self.psi[k]]
            row += [repr(float(z.imag)) for z in self.psi[k]]
            w.writerow(row)
        return buf.getvalue()


def _as2d(v):
    v = np.asarray(v)
    return v[:, None] if v.ndim == 1 else v


def _integrate_graded(G, t0, h, weight, m):
    out = np.zeros(m, dtype=complex)
    for p, f in G.items():
        y, w = _rule(p, 0.0)
        v = f(y)
        if weight is not None:
            v = _as2d(weight(t0 + h * y)) * v
        out += h * (w @ v)
    return out


def _check_forcing(forcing: MeasureForcing, m):
    if forcing.m != m:
        raise ValidationError("forcing dimension does not match the model")


def solve_riccati(params: ModelParams, forcing: MeasureForcing, grid: GridSpec) -> RiccatiSolution:
    """Solve psi = K * (mu + R(psi)) on ``grid`` (atoms at t excluded from psi(t))."""
    _check_forcing(forcing, params.m)
    if not isinstance(forcing, MeasureForcing):
        raise ValidationError("forcing must be a MeasureForcing")
    atoms = forcing.atoms_on(grid)
    prob = _RiccatiProblem(params, forcing.density_on(grid))
    prob.h = grid.step
    eng = _Engine(params.kernel, grid, atoms, prob)
    chi, near_cells, defect = eng.run()
    psi = eng.Phi + chi
    res = float(math.sqrt(grid.step * np.sum(defect**2)))
    sol = RiccatiSolution(params, forcing, grid, psi, chi, eng.atoms, near_cells, res, eng)
    if np.max(psi.real) > 1e-10 * (1.0 + np.max(np.abs(psi))):
        # Re psi <= 0 holds for the exact solution; a violation means the step
        # does not resolve the dynamics right after an atom
        sol.tail["sign_warning"] = float(np.max(psi.real))
        warnings.warn(
            f"max Re psi = {sol.tail['sign_warning']:.3g} > 0: step {grid.step:g} is too coarse for this forcing",
            RuntimeWarning,
            stacklevel=2,
        )
    return sol


def directional_derivative(params: ModelParams, base: MeasureForcing, direction, grid: GridSpec, base_solution=None):
    """D_nu psi(t_k, mu) from the linear equation D = K * nu + K * (DR(psi) D).

    ``direction`` is a forcing without sign restrictions (see ``model.direction``).
    Returns an (n+1, m) complex array.
    """
    _check_forcing(direction, params.m)
    sol = base_solution if base_solution is not None else solve_riccati(params, base, grid)
    atoms = direction.atoms_on(grid)
    f = _density_nodes(direction, grid)
    prob = _LinearizedProblem(params, f, sol)
    prob.h = grid.step
    eng = _Engine(params.kernel, grid, atoms, prob)
    chi, _, _ = eng.run()
    return eng.Phi + chi


def _density_nodes(forcing, grid):
    if forcing.density is None:
        return np.zeros((grid.n_steps + 1, forcing.m), dtype=complex)
    return MeasureForcing.density_on(forcing, grid)


# -- tails -------------------------------------------------------------------


def _tail_profile(spec: KernelSpec):
    """(power, rate, fit_rate) of the slowest kernel component's resolvent tail."""
    lam = min(c.lam for c in spec.components)
    H = min(c.H for c in spec.components if c.lam == lam)
    if H < 0.5:
        return H + 1.5, lam, False
    return 0.0, 0.0, True


def _fit_tail(t, v, p, rate, fit_rate, gap=None):
    """int_T^inf of a complex signal extrapolated from its last decade."""
    vals = np.stack([v.real, v.imag], axis=-1)
    out = _tail_integral(vals, t, p, rate, fit_rate, gap)
    return out[..., 0] + 1j * out[..., 1]


@dataclass
class TailSummary:
    psi_integral: np.ndarray
    R_integral: np.ndarray
    psi_sq_integral: np.ndarray
    window_ratio: float
    converged: bool
    extrapolated: np.ndarray

    def to_dict(self):
        def cv(z):
            return [[float(x.real), float(x.imag)] for x in np.atleast_1d(z)]

        return {
            "psi_integral": cv(self.psi_integral),
            "R_integral": cv(self.R_integral),
            "psi_sq_integral": cv(self.psi_sq_integral),
            "window_ratio": self.window_ratio,
            "converged": self.converged,
        }


def tail_integrals(sol: RiccatiSolution, window_tol=1e-8) -> TailSummary:
    """int_0^inf psi, R(psi) and psi_i^2: grid integral plus extrapolated tail."""
    params = sol.params
    n = sol.grid.n_steps
    c1, c2 = sol.cumulative_integrals()
    I1, I2 = c1[-1], c2[-1]
    if not np.any(I1) and not np.any(I2):
        z = np.zeros(params.m, dtype=complex)
        return TailSummary(z, z.copy(), z.copy(), 0.0, True, z.copy())
    p, rate, fit_rate = _tail_profile(params.kernel)
    t = sol.times
    gap = _tail_gap(params.kernel)
    T1 = _fit_tail(t[1:], sol.psi[1:], p, rate, fit_rate, gap)
    T2 = _fit_tail(t[1:], sol.psi[1:] ** 2, 2 * p, 2 * rate, fit_rate, gap)
    if not (np.all(np.isfinite(T1)) and np.all(np.isfinite(T2))):
        raise NumericalError("psi does not decay; tail integrals diverge")
    w1 = np.abs(c1[-1] - c1[n // 2])
    w2 = np.abs(c2[-1] - c2[n // 2])
    tot = np.abs(I1) + np.abs(I2)
    ratio = float(np.max((w1 + w2) / np.where(tot > 0, tot, 1.0)))
    J1, J2 = I1 + T1, I2 + T2
    RI = J1 @ params.beta + 0.5 * params.sigma**2 * J2
    return TailSummary(J1, RI, J2, ratio, ratio < window_tol, T1)


def _resolvent_norms(spec: KernelSpec, B, grid: GridSpec):
    """(L2, L1) norms over [0, T] of |E_B(t)|_F; the first cell uses K exactly."""
    from .resolvents import resolvent_second_kind

    pair = resolvent_second_kind(spec, B, grid)
    h = grid.step
    fro = np.linalg.norm(pair.E_values[1:], axis=(1, 2))
    sq_first = float(np.sum([c.square_integral(h) for c in spec.components]))
    l2sq = sq_first + h * (np.sum(fro**2) - 0.5 * (fro[0] ** 2 + fro[-1] ** 2))
    cells = np.linalg.norm(pair.E_increments[1:], axis=(1, 2))
    return math.sqrt(max(l2sq, 0.0)), float(cells.sum())


def norm_bounds(sol: RiccatiSolution):
    """Check the a-priori L2 bound on psi (and the L1 bound for real forcings).

    L2: |psi|_2 <= 2 V |E|_2 + (sum sigma^2 / 2) V^2 |E|_2^3 with V the total
    variation of mu on [0, T) and E = E_{beta^T}; L1 (real mu):
    |psi|_1 <= V |E|_1. Norms are taken over the grid horizon.
    """
    params, grid = sol.params, sol.grid
    mu = sol.forcing
    V = sum(float(np.linalg.norm(u)) for s, u in mu.atoms if s < grid.horizon)
    if mu.density is not None:
        V += l1_norm(mu.density_on(grid), grid.step)
    E2, E1 = _resolvent_norms(params.kernel, params.beta.T, grid)
    n1, n2 = sol.norm_integrals()
    lhs2 = math.sqrt(n2)
    rhs2 = 2 * V * E2 + 0.5 * float(np.sum(params.sigma**2)) * V**2 * E2**3
    out = {"l2_psi": lhs2, "l2_bound": rhs2, "l2_ok": bool(lhs2 <= rhs2 * (1 + 1e-9)), "variation": V}
    if mu.is_real:
        out.update({"l1_psi": n1, "l1_bound": V * E1, "l1_ok": bool(n1 <= V * E1 * (1 + 1e-9))})
    return out


def l1_norm(values, h):
    """Discrete L1 norm over nodes (trapezoid) of an (n+1, m) array."""
    a = np.linalg.norm(values, axis=-1)
    return float(h * (a.sum() - 0.5 * (a[0] + a[-1])))


def l2_norm(values, h):
    """Discrete L2 norm over nodes (trapezoid) of an (n+1, m) array."""
    a = np.sum(np.abs(values) ** 2, axis=-1)
    return math.sqrt(h * (a.sum() - 0.5 * (a[0] + a[-1])))


__all__ = [
    "RiccatiSolution",
    "TailSummary",
    "directional_derivative",
    "quadratic_map",
    "solve_riccati",
    "tail_integrals",
    "l2_norm",
]
