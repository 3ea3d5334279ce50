"""Weighted-density histograms and Besov-type increment diagnostics (m <= 2)."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .kernels import GridSpec
from .model import ModelParams

MIN_SHIFT_BINS = 4


def weight(x):
    """rho(x) = min(1, sqrt(x_1), ..., sqrt(x_m)) for samples of shape (N, m)."""
    return np.minimum(1.0, np.sqrt(np.maximum(x, 0.0)).min(axis=1))


def fd_width(x):
    """Freedman-Diaconis bin width of a 1-d sample (falls back to a range rule)."""
    x = np.asarray(x, dtype=float)
    q75, q25 = np.percentile(x, [75, 25])
    w = 2.0 * (q75 - q25) * x.size ** (-1.0 / 3.0)
    if w <= 0:
        span = x.max() - x.min()
        w = span / max(1.0, math.sqrt(x.size)) if span > 0 else 1.0
    return float(w)


@dataclass
class WeightedDensity:
    """Histogram of rho(x) times the law of X_t, normalised by bin volume."""

    edges: tuple
    values: np.ndarray
    atom_mass_at_zero: float
    bin_width: np.ndarray
    n_samples: int
    histogram_mass: float
    weighted_mass: float
    degenerate: bool = False
    notes: list = field(default_factory=list)

    @property
    def m(self):
        return len(self.edges)

    @property
    def centers(self):
        return tuple(0.5 * (e[1:] + e[:-1]) for e in self.edges)

    @property
    def atom_se(self):
        a = self.atom_mass_at_zero
        return math.sqrt(max(a * (1 - a), 0.0) / self.n_samples)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.m == 1:
            w.writerow(["bin_center", "weighted_density"])
            for c, v in zip(self.centers[0], self.values):
                w.writerow([repr(float(c)), repr(float(v))])
        else:
            w.writerow(["bin_center_0", "bin_center_1", "weighted_density"])
            c0, c1 = self.centers
            for i, a in enumerate(c0):
                for j, b in enumerate(c1):
                    w.writerow([repr(float(a)), repr(float(b)), repr(float(self.values[i, j]))])
        return buf.getvalue()

    def summary(self):
        return {
            "atom_mass_at_zero": self.atom_mass_at_zero,
            "atom_se": self.atom_se,
            "bin_width": [float(v) for v in self.bin_width],
            "n_bins": [len(e) - 1 for e in self.edges],
            "n_samples": self.n_samples,
            "histogram_mass": self.histogram_mass,
            "weighted_mass": self.weighted_mass,
            "degenerate": self.degenerate,
            "notes": list(self.notes),
        }


def weighted_density(samples, bins=None, epsilon=None) -> WeightedDensity:
    """Weighted histogram of samples (N,) or (N, m), m <= 2, on [0, max].

    ``bins`` is a bin width (scalar or per axis); Freedman-Diaconis by default.
    The zero atom is the fraction of samples with some coordinate below
    ``epsilon`` (one bin width by default). Samples in the first bin still
    enter the histogram, where rho suppresses them.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] not in (1, 2):
        raise ValidationError("weighted densities are supported for m <= 2")
    N, m = x.shape
    if N < 1:
        raise ValidationError("no samples")
    notes = []
    if N < 10_000:
        warnings.warn(f"only {N} samples; the density estimate is unreliable", stacklevel=2)
        notes.append("fewer than 1e4 samples")
    x = np.maximum(x, 0.0)
    rho = weight(x)
    spread = x.max(axis=0) - x.min(axis=0)
    degenerate = bool(np.all(spread == 0))
    if bins is None:
        widths = np.array([fd_width(x[:, i]) for i in range(m)])
    else:
        widths = np.broadcast_to(np.asarray(bins, dtype=float), (m,)).copy()
        if np.any(widths <= 0):
            raise ValidationError("bin width must be positive")
    edges = []
    for i in range(m):
        nb = max(1, math.ceil(x[:, i].max() / widths[i] + 1e-12))
        if x[:, i].max() >= nb * widths[i]:
            nb += 1
        edges.append(widths[i] * np.arange(nb + 1))
    hist, _ = np.histogramdd(x, bins=edges, weights=rho)
    vol = float(np.prod(widths))
    values = hist / (N * vol)
    eps = widths.min() if epsilon is None else float(epsilon)
    atom = float(np.mean(np.any(x < eps, axis=1)))
    if degenerate:
        notes.append("degenerate sample; regularity diagnostics inapplicable")
        if np.all(x == 0):
            atom = 1.0
    return WeightedDensity(
        edges=tuple(edges),
        values=values if m == 2 else values.reshape(-1),
        atom_mass_at_zero=atom,
        bin_width=widths,
        n_samples=N,
        histogram_mass=1.0 - atom,
        weighted_mass=float(rho.sum() / N),
        degenerate=degenerate,
        notes=notes,
    )


@dataclass
class IncrementCurve:
    shifts: np.ndarray
    integrals: np.ndarray
    exponent: float
    exponent_band: tuple
    constant: float
    applicable: bool = True

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["shift", "increment_integral"])
        for s, v in zip(self.shifts, self.integrals):
            w.writerow([repr(float(s)), repr(float(v))])
        return buf.getvalue()

    def summary(self):
        return {
            "exponent": self.exponent,
            "exponent_band": list(self.exponent_band),
            "constant": self.constant,
            "applicable": self.applicable,
            "shifts": [float(s) for s in self.shifts],
            "integrals": [float(v) for v in self.integrals],
        }


def increment_integral(wd: WeightedDensity, shift_bins):
    """Discrete int |p*(x + h e) - p*(x)| dx, maximised over the coordinate axes."""
    v = np.asarray(wd.values)
    if wd.m == 1:
        v = v[:, None]
    vol = float(np.prod(wd.bin_width))
    best = 0.0
    for ax in range(wd.m):
        pad = [(0, 0)] * v.ndim
        pad[ax] = (shift_bins, shift_bins)
        p = np.pad(v, pad)
        a = np.take(p, np.arange(shift_bins, p.shape[ax]), axis=ax)
        b = np.take(p, np.arange(0, p.shape[ax] - shift_bins), axis=ax)
        best = max(best, float(np.abs(a - b).sum() * vol))
    return best


def fit_exponent(shifts, integrals):
    """Least-squares log-log slope, a 2-sigma band and C = max I(h) / h^slope."""
    s = np.asarray(shifts, dtype=float)
    y = np.asarray(integrals, dtype=float)
    ok = y > 0
    if ok.sum() < 2:
        return float("nan"), (float("nan"), float("nan")), float("nan")
    lx, ly = np.log(s[ok]), np.log(y[ok])
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, res, *_ = np.linalg.lstsq(A, ly, rcond=None)
    slope = float(coef[0])
    dof = ok.sum() - 2
    if dof > 0:
        resid = ly - A @ coef
        s2 = float(resid @ resid) / dof
        se = math.sqrt(s2 / float(((lx - lx.mean()) ** 2).sum()))
    else:
        se = 0.0
    C = float(np.max(y[ok] / s[ok] ** slope))
    return slope, (slope - 2 * se, slope + 2 * se), C


def besov_increment_curve(wd: WeightedDensity, shifts) -> IncrementCurve:
    """Increment integrals for each shift (multiples of the bin width, at least 4 bins)."""
    w = float(np.min(wd.bin_width))
    shifts = np.asarray(shifts, dtype=float)
    if wd.degenerate:
        return IncrementCurve(shifts, np.zeros_like(shifts), float("nan"), (float("nan"),) * 2, float("nan"), False)
    ks = []
    for h in shifts:
        if not 0 < h <= 1 + 1e-12:
            raise ValidationError("shifts must lie in (0, 1]")
        k = round(h / w)
        if abs(k * w - h) > 1e-6 * w:
            raise ValidationError(f"shift {h} is not a multiple of the bin width {w}")
        if k < MIN_SHIFT_BINS:
            raise ValidationError(f"shift {h} spans fewer than {MIN_SHIFT_BINS} bins")
        ks.append(k)
    vals = np.array([increment_integral(wd, k) for k in ks])
    slope, band, C = fit_exponent(shifts, vals)
    return IncrementCurve(shifts, vals, slope, band, C)


def shift_ladder(wd: WeightedDensity, n=6, max_shift=1.0):
    """Geometric ladder of shifts from 4 bins up to ``max_shift`` (bin multiples)."""
    w = float(np.min(wd.bin_width))
    kmax = max(MIN_SHIFT_BINS, int(max_shift / w))
    ks = np.unique(np.round(np.geomspace(MIN_SHIFT_BINS, kmax, n)).astype(int))
    return ks * w


@dataclass
class LimitDensityReport:
    density: WeightedDensity
    curve: IncrementCurve
    burn_in: float
    degenerate: bool

    def summary(self):
        d = {"burn_in": self.burn_in, "degenerate": self.degenerate}
        d.update({"density": self.density.summary(), "increments": self.curve.summary()})
        return d


def limit_density_diagnostics(
    params: ModelParams, burn_in, n_samples=100_000, seed=0, step=None, shifts=None, samples=None, threads=1
) -> LimitDensityReport:
    """Weighted density and increment curve of X at a large time ``burn_in``.

    Either simulates ``n_samples`` paths up to ``burn_in`` or uses ``samples``.
    """
    from .moments import limit_summary
    from .simulate import simulate_paths

    limit_summary(params)  # raises when no limit is certified
    degenerate = bool(np.all(params.sigma == 0))
    if samples is None:
        h = step or 1.0 / 20
        n = max(1, math.ceil(burn_in / h - 1e-9))
        grid = GridSpec(burn_in / n, n)
        ens = simulate_paths(params, grid, n_samples, seed, threads=threads, stride=n)
        samples = ens.values[:, -1, :]
    samples = np.asarray(samples, dtype=float)
    wd = weighted_density(samples)
    if degenerate:
        wd.notes.append("sigma = 0: deterministic limit")
    if wd.degenerate or degenerate:
        curve = IncrementCurve(np.array([]), np.array([]), float("nan"), (float("nan"),) * 2, float("nan"), False)
    else:
        curve = besov_increment_curve(wd, shifts if shifts is not None else shift_ladder(wd))
    return LimitDensityReport(wd, curve, float(burn_in), degenerate or wd.degenerate)
