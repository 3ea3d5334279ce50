"""Diagonal convolution kernels, exact cell integrals and admissibility checks.

Every supported scalar kernel has the form

    K(t) = t^(H - 1/2) exp(-lam t) / Gamma(H + 1/2),   0 < H <= 1/2, lam >= 0,

which covers the fractional kernel (lam = 0), the Gamma kernel and the
constant kernel K = 1 (H = 1/2, lam = 0).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import mpmath
import numpy as np
from scipy import integrate, special

from .errors import NumericalError, ValidationError

KINDS = ("fractional", "gamma", "constant")

_GL_X, _GL_W = np.polynomial.legendre.leggauss(12)


def power_exp_integral(p, lam, a, b):
    """Exact integral of r^(p-1) exp(-lam r) over [a, b], vectorized in a and b.

    ``b`` may be ``np.inf`` when ``lam > 0``.  Narrow cells away from the
    origin are integrated with Gauss-Legendre to avoid cancellation.
    """
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    out = np.empty(a.shape)
    width = b - a
    narrow = (a > 0) & np.isfinite(b) & (width <= 0.25 * a) & (lam * width <= 1.0)
    if narrow.any():
        aa, ww = a[narrow][:, None], width[narrow][:, None]
        r = aa + 0.5 * ww * (_GL_X + 1.0)
        vals = r ** (p - 1.0) * np.exp(-lam * r)
        out[narrow] = 0.5 * width[narrow] * (vals @ _GL_W)
    wide = ~narrow
    if wide.any():
        aw, bw = a[wide], b[wide]
        if lam == 0.0:
            if np.any(~np.isfinite(bw)):
                raise ValidationError("integral to infinity diverges for lam = 0")
            out[wide] = (bw**p - aw**p) / p
        else:
            scale = special.gamma(p) * lam ** (-p)
            upper = lam * aw > p
            res = np.empty(aw.shape)
            xa, xb = lam * aw, lam * bw
            res[upper] = special.gammaincc(p, xa[upper]) - special.gammaincc(p, xb[upper])
            res[~upper] = special.gammainc(p, xb[~upper]) - special.gammainc(p, xa[~upper])
            out[wide] = scale * res
    return out


@dataclass(frozen=True)
class ScalarKernel:
    """One diagonal entry of the convolution kernel.

    Parameters
    ----------
    kind : {"fractional", "gamma", "constant"}
    H : float
        Roughness exponent in (0, 1/2].
    lam : float
        Exponential damping rate, zero for the fractional and constant kinds.
    """

    kind: str
    H: float = 0.5
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "constant" and (self.H != 0.5 or self.lam != 0.0):
            raise ValidationError("constant kernel takes no parameters")
        if not (0.0 < self.H <= 0.5) or not math.isfinite(self.H):
            raise ValidationError(f"H must lie in (0, 1/2], got {self.H}")
        if not (self.lam >= 0.0) or not math.isfinite(self.lam):
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if self.kind == "fractional" and self.lam != 0.0:
            raise ValidationError("fractional kernel has lambda = 0")

    @classmethod
    def fractional(cls, H):
        return cls("fractional", float(H), 0.0)

    @classmethod
    def gamma(cls, H, lam):
        return cls("gamma", float(H), float(lam))

    @classmethod
    def constant(cls):
        return cls("constant")

    @property
    def alpha(self):
        return self.H + 0.5

    @property
    def singular(self):
        return self.H < 0.5

    @property
    def integrable(self):
        return self.lam > 0.0

    def __call__(self, t):
        return self.eval(t)

    def eval(self, t):
        """K(t); raises for t <= 0 when the kernel is singular at the origin."""
        t = np.asarray(t, dtype=float)
        if self.singular and np.any(t <= 0):
            raise ValidationError("singular kernel evaluated at t <= 0")
        if np.any(t < 0):
            raise ValidationError("kernel evaluated at negative time")
        a = self.alpha
        out = np.exp(-self.lam * t) if self.lam > 0 else np.ones_like(t)
        out = out / special.gamma(a)
        if a != 1.0:
            out = out * t ** (a - 1.0)
        return out[()] if out.ndim == 0 else out

    def cell_integral(self, a, b):
        """Exact integral of K over [a, b]."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if np.any(a < 0) or np.any(b < a):
            raise ValidationError("cell integral needs 0 <= a <= b")
        out = power_exp_integral(self.alpha, self.lam, a, b) / special.gamma(self.alpha)
        return out[()] if out.ndim == 0 else out

    def integral(self, t):
        """Antiderivative int_0^t K."""
        return self.cell_integral(np.zeros_like(np.asarray(t, dtype=float)), t)

    def first_moment(self, a, b):
        """Exact integral of r K(r) over [a, b]."""
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        out = power_exp_integral(self.alpha + 1.0, self.lam, a, b) / special.gamma(self.alpha)
        return out[()] if out.ndim == 0 else out

    def total_integral(self):
        """int_0^inf K, infinite unless lam > 0."""
        return self.lam ** (-self.alpha) if self.lam > 0 else math.inf

    def square_integral(self, h):
        """int_0^h K(r)^2 dr in closed form."""
        h = np.asarray(h, dtype=float)
        out = power_exp_integral(2.0 * self.H, 2.0 * self.lam, np.zeros_like(h), h)
        out = out / special.gamma(self.alpha) ** 2
        return out[()] if out.ndim == 0 else out

    def to_dict(self):
        if self.kind == "constant":
            return {"kind": "constant"}
        if self.kind == "fractional":
            return {"kind": "fractional", "H": self.H}
        return {"kind": "gamma", "H": self.H, "lambda": self.lam}

    @classmethod
    def from_dict(cls, d):
        kind = d.get("kind")
        if kind == "constant":
            return cls.constant()
        if kind == "fractional":
            return cls.fractional(d["H"])
        if kind == "gamma":
            return cls.gamma(d["H"], d.get("lambda", 0.0))
        raise ValidationError(f"unknown kernel kind {kind!r}")


@dataclass(frozen=True)
class KernelSpec:
    """Diagonal matrix kernel diag(K_1, ..., K_m)."""

    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValidationError("kernel needs at least one component")
        if not all(isinstance(c, ScalarKernel) for c in comps):
            raise ValidationError("components must be ScalarKernel instances")
        object.__setattr__(self, "components", comps)

    @classmethod
    def uniform(cls, kernel, m):
        return cls((kernel,) * m)

    @property
    def m(self):
        return len(self.components)

    @property
    def singular(self):
        return any(c.singular for c in self.components)

    def _stack(self, name, *args):
        return np.stack([np.asarray(getattr(c, name)(*args)) for c in self.components], axis=-1)

    def eval(self, t):
        """Diagonal entries K_i(t); shape ``t.shape + (m,)``."""
        return self._stack("eval", t)

    def cell_integral(self, a, b):
        return self._stack("cell_integral", a, b)

    def first_moment(self, a, b):
        return self._stack("first_moment", a, b)

    def integral(self, t):
        return self._stack("integral", t)

    def total_integrals(self):
        return np.array([c.total_integral() for c in self.components])

    def to_dict(self):
        return {"m": self.m, "components": [c.to_dict() for c in self.components]}

    @classmethod
    def from_dict(cls, d):
        comps = tuple(ScalarKernel.from_dict(c) for c in d["components"])
        if "m" in d and d["m"] != len(comps):
            raise ValidationError("kernel 'm' does not match the number of components")
        return cls(comps)


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid t_k = k h, k = 0..n_steps."""

    step: float
    n_steps: int

    def __post_init__(self):
        if not (self.step > 0) or not math.isfinite(self.step):
            raise ValidationError("grid step must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValidationError("n_steps must be a positive integer")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def from_horizon(cls, step, horizon):
        n = round(horizon / step)
        if n < 1 or abs(n * step - horizon) > 1e-9 * max(1.0, horizon):
            raise ValidationError(f"horizon {horizon} is not a multiple of step {step}")
        return cls(float(step), int(n))

    @property
    def horizon(self):
        return self.step * self.n_steps

    @property
    def nodes(self):
        return self.step * np.arange(self.n_steps + 1)

    def index(self, t, tol=1e-6):
        """Grid index of time ``t``; raises unless t is a node up to tol*h/2."""
        k = round(t / self.step)
        if abs(k * self.step - t) > 0.5 * tol * self.step or not 0 <= k <= self.n_steps:
            raise ValidationError(f"time {t} is not a grid node")
        return int(k)


@dataclass
class AdmissibilityReport:
    gamma_estimate: float
    alpha_estimate: float
    C1: float
    C2: float
    C3: float
    C_star: float
    monotone_ok: bool
    nonneg_ok: bool
    per_component: list = field(default_factory=list)

    def to_dict(self):
        return {
            "gamma_estimate": self.gamma_estimate,
            "alpha_estimate": self.alpha_estimate,
            "C1": self.C1,
            "C2": self.C2,
            "C3": self.C3,
            "C_star": self.C_star,
            "monotone_ok": self.monotone_ok,
            "nonneg_ok": self.nonneg_ok,
            "per_component": self.per_component,
        }


def _shift_sq_integral(k: ScalarKernel, h, upper):
    """int_0^upper |K(r+h) - K(r)|^2 dr via the substitution r = h v.

    On [0, 1] the further substitution v = w^(1/2H) removes the v^(2H-1)
    singularity of the integrand.
    """
    if k.kind == "constant":
        return 0.0
    vmax = upper / h
    c = 1.0 / math.gamma(k.alpha)
    p, lam = k.alpha - 1.0, k.lam

    def K(t):
        return c * t**p * (math.exp(-lam * t) if lam > 0 else 1.0)

    def f(v):
        return (K(h * (v + 1.0)) - K(h * v)) ** 2

    q = 1.0 / (2.0 * k.H)

    def g(w):
        if w == 0.0:
            return q * (c * h**p) ** 2 if p < 0 else 0.0
        v = w**q
        return f(v) * q * w ** (q - 1.0)

    total = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        total += integrate.quad(g, 0.0, min(1.0, vmax) ** (1.0 / q), limit=200, epsabs=0.0, epsrel=1e-10)[0]
        edges = [1.0]
        stop = min(vmax, 1e8)
        while edges[-1] < stop:
            edges.append(min(edges[-1] * 10.0, stop))
        for lo, hi in zip(edges[:-1], edges[1:]):
            total += integrate.quad(f, lo, hi, limit=200, epsabs=0.0, epsrel=1e-10)[0]
        if vmax > stop:
            total += integrate.quad(f, edges[-1], np.inf, limit=200)[0]
    return h * total


def _loglog_slope(x, y):
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)


def check_admissibility(spec: KernelSpec, probe: GridSpec, ladder=None):
    """Empirical check of the kernel regularity conditions on a dyadic ladder.

    Fits log-log slopes of int_0^h K^2 and of the L2 shift increments against
    h, reporting the exponents and the smallest constants that make the
    power bounds hold on the ladder.
    """
    if probe.horizon < 1.0:
        raise ValidationError("probe horizon must be at least 1")
    hs = np.asarray(ladder if ladder is not None else 2.0 ** -np.arange(4, 15), dtype=float)
    if len(hs) < 8:
        raise ValidationError("ladder needs at least 8 points")
    T = probe.horizon
    nodes = probe.nodes[1:]
    gammas, alphas, comps = [], [], []
    C1 = C2 = C3 = 0.0
    C_star = math.inf
    mono = nonneg = True
    for k in spec.components:
        sq = np.array([k.square_integral(h) for h in hs])
        shift_T = np.array([_shift_sq_integral(k, h, T) for h in hs])
        shift_inf = np.array([_shift_sq_integral(k, h, math.inf) for h in hs])
        s1 = _loglog_slope(hs, sq)
        s2 = _loglog_slope(hs, shift_T) if np.all(shift_T > 0) else 2.0
        g = min(s1, s2, 2.0)
        a = min(max(s1, g), 2.0)
        vals = k.eval(nodes)
        mono = mono and bool(np.all(np.diff(vals) <= 1e-15 * vals[:-1]))
        nonneg = nonneg and bool(np.all(vals >= 0))
        c1 = float(np.max(sq / hs**g))
        c2 = float(np.max(shift_T / hs**g))
        c3 = float(np.max(shift_inf / hs**g))
        cs = float(np.min(sq / hs**a))
        comps.append({"gamma": g, "alpha": a, "C1": c1, "C2": c2, "C3": c3, "C_star": cs})
        gammas.append(g)
        alphas.append(a)
        C1, C2, C3 = max(C1, c1), max(C2, c2), max(C3, c3)
        C_star = min(C_star, cs)
    return AdmissibilityReport(
        gamma_estimate=min(gammas),
        alpha_estimate=max(min(alphas), min(gammas)),
        C1=C1,
        C2=C2,
        C3=C3,
        C_star=C_star,
        monotone_ok=mono,
        nonneg_ok=nonneg,
        per_component=comps,
    )


# -- Mittag-Leffler -----------------------------------------------------------

_ML_SERIES_RADIUS = 10.0


def _ml_series_mp(alpha, z, dps):
    with mpmath.workdps(dps):
        z = mpmath.mpf(z)
        a = mpmath.mpf(alpha)
        total = mpmath.mpf(0)
        tol = mpmath.mpf(10) ** -(dps - 5)
        for n in range(20000):
            term = z**n / mpmath.gamma(a * n + a)
            total += term
            if n > 5 and abs(term) < tol and abs(term) < abs(total) * 1e-30:
                return float(total)
    raise NumericalError("Mittag-Leffler series did not converge", {"alpha": alpha, "z": float(z)})


def _ml_series(alpha, z):
    """Series on |z| <= 10: float64 when cancellation is mild, mpmath otherwise."""
    z = np.asarray(z, dtype=float)
    n = np.arange(400)
    log_terms = n[:, None] * np.log(np.maximum(np.abs(z), 1e-300))[None, :] - special.gammaln(alpha * n + alpha)[:, None]
    terms = np.exp(log_terms) * np.where(z < 0, (-1.0) ** n[:, None], 1.0)
    terms[0] = 1.0 / special.gamma(alpha)
    total = terms.sum(axis=0)
    ratio = np.abs(terms).sum(axis=0) / np.abs(total)
    out = total.copy()
    for i in np.flatnonzero(ratio > 1e4):
        dps = 30 + int(math.ceil(math.log10(ratio[i])))
        out[i] = _ml_series_mp(alpha, float(z[i]), dps)
    return out


def _ml_negative_integral(alpha, x):
    """M_alpha(-x) for x > 0 and 0 < alpha < 1 from the spectral representation."""
    t = x ** (1.0 / alpha)
    s, c = math.sin(alpha * math.pi), math.cos(alpha * math.pi)

    def f(v):
        r = (v / t) ** alpha
        return math.exp(-v) * r * s / (r * r + 2.0 * r * c + 1.0)

    edges = [0.0, t, 60.0] if t < 60.0 else [0.0, 60.0]
    total = 0.0
    for lo, hi in zip(edges, edges[1:] + [math.inf]):
        val, _ = integrate.quad(f, lo, hi, limit=400, epsabs=0.0, epsrel=1e-13)
        total += val
    e_alpha = total / (math.pi * t)
    return t ** (1.0 - alpha) * e_alpha


def mittag_leffler(alpha, z):
    """M_alpha(z) = sum_n z^n / Gamma(alpha n + alpha) for 0 < alpha <= 1.

    The series is used for |z| <= 10 (with extended precision when the
    alternating terms cancel), an integral representation for z < -10.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValidationError("alpha must lie in (0, 1]")
    alpha = float(alpha)
    z_arr = np.asarray(z, dtype=float)
    flat = z_arr.ravel()
    if np.any(np.where(flat > 0, flat, 0.0) ** (1.0 / alpha) > 700.0):
        raise NumericalError("Mittag-Leffler overflow", {"alpha": alpha, "z_max": float(flat.max())})
    if alpha == 1.0:
        out = np.exp(flat)
    else:
        out = np.empty(flat.shape)
        near = flat >= -_ML_SERIES_RADIUS
        if near.any():
            out[near] = _ml_series(alpha, flat[near])
        for i in np.flatnonzero(~near):
            out[i] = _ml_negative_integral(alpha, -flat[i])
    out = out.reshape(z_arr.shape)
    return out[()] if out.ndim == 0 else out


def ml_e(alpha, t):
    """e_alpha(t) = t^(alpha-1) M_alpha(-t^alpha); t = 0 is allowed only for alpha = 1."""
    t = np.asarray(t, dtype=float)
    if alpha == 1.0:
        if np.any(t < 0):
            raise ValidationError("e_alpha needs t >= 0")
        out = np.exp(-t)
        return out[()] if np.ndim(out) == 0 else out
    if np.any(t <= 0):
        raise ValidationError("e_alpha needs t > 0")
    out = t ** (alpha - 1.0) * mittag_leffler(alpha, -(t**alpha))
    return out[()] if np.ndim(out) == 0 else out


# -- Sobolev-type seminorm ----------------------------------------------------


def _geometric_panels(lo, hi, per_decade=3):
    n = max(1, int(math.ceil(per_decade * math.log10(hi / lo))))
    return np.geomspace(lo, hi, n + 1)


def _panel_rule(edges, order=10):
    x, w = np.polynomial.legendre.leggauss(order)
    a, b = edges[:-1, None], edges[1:, None]
    pts = a + 0.5 * (b - a) * (x + 1.0)
    wts = 0.5 * (b - a) * w
    return pts.ravel(), wts.ravel()


@dataclass
class SeminormResult:
    value: float
    divergent: bool
    levels: list

    def to_dict(self):
        return {"value": self.value, "divergent": self.divergent, "levels": self.levels}


def kernel_sobolev_seminorm(spec: KernelSpec, eta, p, T, eps_levels=None):
    """Estimate [K]_{eta,p,T} by geometric tensor quadrature.

    The integrals are cut at distance eps from the singular sets and the cut
    is refined; geometric decay of the increments means convergence (the
    limit is extrapolated), otherwise the seminorm is reported as divergent.
    """
    if not 0 < eta < 1 or p < 2 or T <= 0:
        raise ValidationError("need 0 < eta < 1, p >= 2, T > 0")
    eps_levels = list(eps_levels or [10.0**-j for j in range(3, 11)])

    def norm(t):
        return np.max(np.abs(spec.eval(t)), axis=-1)

    values = []
    for eps in eps_levels:
        tp, tw = _panel_rule(_geometric_panels(eps, T))
        first = np.sum(tw * tp ** (-eta * p) * norm(tp) ** p)
        # second term: 2 int_eps^T dt int_eps^t dtau |K(t)-K(t-tau)|^p tau^(-1-eta p), t - tau >= eps
        taup, tauw = _panel_rule(_geometric_panels(eps, T))
        tt, ta = np.meshgrid(tp, taup, indexing="ij")
        wt = np.outer(tw, tauw)
        ok = ta <= tt - eps
        diff = np.zeros_like(tt)
        if np.any(ok):
            ktt = np.broadcast_to(spec.eval(tt[ok]), (ok.sum(), spec.m))
            kts = spec.eval(tt[ok] - ta[ok])
            diff[ok] = np.max(np.abs(ktt - kts), axis=-1) ** p * ta[ok] ** (-1.0 - eta * p)
        second = 2.0 * np.sum(wt * diff)
        values.append(float(first + second))
    inc = np.diff(values)
    divergent = False
    limit = values[-1]
    if len(inc) >= 2 and inc[-2] > 0:
        q = inc[-1] / inc[-2]
        if q >= 0.95:
            divergent = True
        elif q > 0:
            limit = values[-1] + inc[-1] * q / (1.0 - q)
    value = math.inf if divergent else limit ** (1.0 / p)
    return SeminormResult(value=value, divergent=divergent, levels=values)
