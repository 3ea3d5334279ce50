"""Monte Carlo for the Volterra square-root process and MC estimators."""

from __future__ import annotations

import csv
import io
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import NumericalError, ValidationError
from .kernels import GridSpec
from .model import MeasureForcing, ModelParams
from .resolvents import cell_masses, resolvent_second_kind

MAGIC = b"VSQR1"
HEADER = struct.Struct("<5sqqqdQ")
BLOCK_PATHS = 2048
EXPLOSION = 1e10
SCHEMES = ("direct", "resolvent")


@dataclass
class PathEnsemble:
    """Simulated states, shape (n_paths, n_steps + 1, m), all >= 0."""

    grid: GridSpec
    n_paths: int
    values: np.ndarray
    seed: int
    scheme: str
    negativity_fraction: float
    moment_cache: dict = field(default_factory=dict)

    @property
    def m(self):
        return self.values.shape[2]

    def at(self, t):
        return self.values[:, self.grid.index(t), :]

    def abs_moment(self, p):
        """E|X_t|^p per node (Euclidean norm), cached."""
        if p not in self.moment_cache:
            nrm = np.linalg.norm(self.values, axis=2)
            self.moment_cache[p] = np.mean(nrm**p, axis=0)
        return self.moment_cache[p]

    def summary_csv(self):
        m = self.m
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"mean[{i}]" for i in range(m)] + [f"std[{i}]" for i in range(m)])
        mean = self.values.mean(axis=0)
        std = self.values.std(axis=0, ddof=1) if self.n_paths > 1 else np.zeros_like(mean)
        for k, t in enumerate(self.grid.nodes):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in mean[k]] + [repr(float(x)) for x in std[k]])
        return buf.getvalue()

    def dump(self, path):
        """Binary dump: header then little-endian float64 values in C order."""
        with open(path, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, self.m, self.grid.n_steps, self.n_paths, self.grid.step, self.seed))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())


def load_ensemble(path, scheme="direct"):
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        magic, m, n_steps, n_paths, h, seed = HEADER.unpack(head)
        if magic != MAGIC:
            raise ValidationError(f"{path} is not an ensemble dump")
        vals = np.frombuffer(fh.read(), dtype="<f8").reshape(n_paths, n_steps + 1, m).astype(float)
    return PathEnsemble(GridSpec(h, n_steps), n_paths, vals, seed, scheme, float("nan"))


def block_rng(seed, block):
    """Counter-based stream for one fixed-size block of paths."""
    ss = np.random.SeedSequence(seed, spawn_key=(block,))
    return np.random.Generator(np.random.Philox(ss))


class _Direct:
    def __init__(self, params: ModelParams, grid: GridSpec):
        self.p = params
        self.h = grid.step
        self.n = grid.n_steps
        self.kap = cell_masses(params.kernel, grid)  # (n+1, m)
        comps = params.kernel.components
        self.geometric = all(abs(c.H - 0.5) < 1e-15 for c in comps)
        self.q = np.exp(-np.array([c.lam for c in comps]) * self.h)

    def run(self, dB, out):
        p, h, n, kap = self.p, self.h, self.n, self.kap
        m, P = dB.shape[1], dB.shape[2]
        x0 = p.x0[:, None]
        sig = p.sigma[:, None]
        X = np.repeat(x0, P, axis=1)
        out[0] = X
        neg = 0
        if self.geometric:
            S = np.zeros((m, P))
            for k in range(1, n + 1):
                Z = (p.b[:, None] + p.beta @ X) * h + sig * np.sqrt(X) * dB[k - 1]
                S = self.q[:, None] * S + kap[1][:, None] * Z
                X, neg = _clip(x0 + S, neg, k)
                out[k] = X
            return neg
        Z = np.zeros((m, n, P))
        rev = kap[::-1].T.copy()  # rev[i, n - d] = kap[d, i]
        for k in range(1, n + 1):
            Z[:, k - 1] = (p.b[:, None] + p.beta @ X) * h + sig * np.sqrt(X) * dB[k - 1]
            prop = np.empty((m, P))
            for i in range(m):
                prop[i] = x0[i] + rev[i, n - k + 1 :] @ Z[i, :k]
            X, neg = _clip(prop, neg, k)
            out[k] = X
        return neg


class _Resolvent:
    def __init__(self, params: ModelParams, grid: GridSpec):
        from .moments import mean_curve

        pair = resolvent_second_kind(params.kernel, params.beta, grid)
        self.p = params
        self.n = grid.n_steps
        self.mean = mean_curve(params, grid, pair)  # (n+1, m)
        self.Ebar = pair.E_cell_averages()  # (n, m, m), Ebar[d-1] for lag d
        self.diag = params.m == 1 or not np.any(params.beta - np.diag(np.diag(params.beta)))

    def run(self, dB, out):
        p, n = self.p, self.n
        m, P = dB.shape[1], dB.shape[2]
        sig = p.sigma[:, None]
        X = np.repeat(p.x0[:, None], P, axis=1)
        out[0] = X
        neg = 0
        W = np.zeros((m, n, P))
        rev = self.Ebar[::-1]  # rev[n - d] = Ebar for lag d
        for k in range(1, n + 1):
            W[:, k - 1] = sig * np.sqrt(X) * dB[k - 1]
            w = rev[n - k :]  # (k, m, m), lag k - j for j = 0..k-1
            prop = self.mean[k][:, None].repeat(P, axis=1)
            if self.diag:
                for i in range(m):
                    prop[i] += w[:, i, i] @ W[i, :k]
            else:
                for i in range(m):
                    for l in range(m):
                        prop[i] += w[:, i, l] @ W[l, :k]
            X, neg = _clip(prop, neg, k)
            out[k] = X
        return neg


def _clip(prop, neg, k):
    if not np.all(np.abs(prop) <= EXPLOSION):
        raise NumericalError("simulated state exploded", {"step": k, "max_abs": float(np.nanmax(np.abs(prop)))})
    bad = prop < 0
    return np.where(bad, 0.0, prop), neg + int(bad.sum())


def simulate_paths(
    params: ModelParams, grid: GridSpec, n_paths, seed, scheme="direct", threads=1, stride=1, antithetic=False
) -> PathEnsemble:
    """Euler scheme with full truncation; paths are processed in fixed blocks.

    Each block of ``BLOCK_PATHS`` paths draws from its own counter-based
    stream, so the result does not depend on ``threads``. With ``stride`` > 1
    only every stride-th node is stored and the ensemble grid is coarsened.
    With ``antithetic`` the second half of each block reuses the negated
    increments of the first half (pairs are then not independent).
    """
    if int(n_paths) < 1:
        raise ValidationError("n_paths must be at least 1")
    if scheme not in SCHEMES:
        raise ValidationError(f"scheme must be one of {SCHEMES}")
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValidationError("seed must be a 64-bit unsigned integer")
    n_paths = int(n_paths)
    m, n = params.m, grid.n_steps
    stride = int(stride)
    if stride < 1 or n % stride:
        raise ValidationError("stride must be a positive divisor of n_steps")
    stepper = _Direct(params, grid) if scheme == "direct" else _Resolvent(params, grid)
    values = np.empty((n_paths, n // stride + 1, m))
    sq = math.sqrt(grid.step)
    blocks = [(b, b * BLOCK_PATHS, min(n_paths, (b + 1) * BLOCK_PATHS)) for b in range(-(-n_paths // BLOCK_PATHS))]

    def work(blk):
        b, lo, hi = blk
        if antithetic:
            half = block_rng(seed, b).standard_normal((n, m, (hi - lo + 1) // 2)) * sq
            dB = np.concatenate([half, -half], axis=2)[:, :, : hi - lo]
        else:
            dB = block_rng(seed, b).standard_normal((n, m, hi - lo)) * sq
        out = np.empty((n + 1, m, hi - lo))
        neg = stepper.run(dB, out)
        values[lo:hi] = out[::stride].transpose(2, 0, 1)
        return neg

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            negs = list(ex.map(work, blocks))
    else:
        negs = [work(b) for b in blocks]
    frac = sum(negs) / float(n * m * n_paths) if n else 0.0
    stored = GridSpec(grid.step * stride, n // stride)
    return PathEnsemble(stored, n_paths, values, seed, scheme, frac)


class MCEstimate(NamedTuple):
    value: complex
    se: float
    degenerate: bool


def _pairing(ens: PathEnsemble, forcing: MeasureForcing, t):
    """Per-path int_[0,t] <X_{t-s}, mu(ds)>."""
    grid = ens.grid
    k = grid.index(t)
    Y = np.zeros(ens.n_paths, dtype=complex)
    for s, u in forcing.atoms:
        if s > t * (1 + 1e-12):
            raise ValidationError("forcing atoms must lie in [0, t]")
        j = grid.index(s)
        Y += ens.values[:, k - j, :] @ u
    if forcing.density is not None:
        sub = GridSpec(grid.step, k)
        f = forcing.density_on(sub)  # (k+1, m)
        w = np.full(k + 1, grid.step)
        w[0] = w[-1] = 0.5 * grid.step
        X = ens.values[:, k::-1, :]  # X_{t - s_j}
        Y += np.einsum("pjm,jm,j->p", X, f, w)
    return Y


def mc_log_cf(ens: PathEnsemble, forcing: MeasureForcing, t) -> MCEstimate:
    """log of the sample mean of exp(int <X_{t-s}, mu(ds)>), delta-method SE."""
    W = np.exp(_pairing(ens, forcing, t))
    M = W.mean()
    if np.all(W == W[0]):
        return MCEstimate(complex(np.log(M)), 0.0, True)
    var = np.mean(np.abs(W - M) ** 2) * ens.n_paths / (ens.n_paths - 1)
    se = math.sqrt(var / ens.n_paths) / abs(M)
    return MCEstimate(complex(np.log(M)), float(se), False)


@dataclass
class HolderCurve:
    lags: np.ndarray
    moments: np.ndarray
    slope: float
    p: float

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lag", "moment"])
        for a, b in zip(self.lags, self.moments):
            w.writerow([repr(float(a)), repr(float(b))])
        return buf.getvalue()


def holder_moment_curve(ens: PathEnsemble, p, lags) -> HolderCurve:
    """Time- and path-averaged E|X_{t+d} - X_t|^p for each lag d."""
    if p < 2:
        raise ValidationError("p must be at least 2")
    h = ens.grid.step
    lags = np.asarray(lags, dtype=float)
    out = []
    for d in lags:
        if d > 1 + 1e-12:
            raise ValidationError("lags must not exceed 1")
        j = round(d / h)
        if j < 1 or abs(j * h - d) > 1e-6 * h:
            raise ValidationError(f"lag {d} is not a positive multiple of the step")
        if j > ens.grid.n_steps:
            raise ValidationError(f"lag {d} exceeds the horizon")
        inc = np.linalg.norm(ens.values[:, j:, :] - ens.values[:, :-j, :], axis=2)
        out.append(float(np.mean(inc**p)))
    mom = np.array(out)
    ok = mom > 0
    slope = float(np.polyfit(np.log(lags[ok]), np.log(mom[ok]), 1)[0]) if ok.sum() >= 2 else float("nan")
    return HolderCurve(lags, mom, slope, float(p))


def shifted_marginals(ens: PathEnsemble, burn_in, times=(0.0,)):
    """Samples of X at burn_in + t_j, shape (n_paths, len(times), m)."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if burn_in < 0 or np.any(times < 0):
        raise ValidationError("burn-in and times must be nonnegative")
    if burn_in + times.max() > ens.grid.horizon * (1 + 1e-12):
        raise ValidationError("burn_in + max(times) exceeds the horizon")
    idx = [ens.grid.index(burn_in + t) for t in times]
    return ens.values[:, idx, :]


def mean_with_se(samples):
    """Componentwise sample mean and standard error over the first axis."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    se = samples.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(samples.shape[1:])
    return samples.mean(axis=0), se


def moment_boundedness_ratio(ens: PathEnsemble):
    """max E|X_t|^2 over [T/2, T] divided by its max over [T/4, T/2]."""
    mom = ens.abs_moment(2)
    n = ens.grid.n_steps
    late = mom[n // 2 :].max()
    early = mom[n // 4 : n // 2 + 1].max()
    return float(late / early) if early > 0 else float("nan")
