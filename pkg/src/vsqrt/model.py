"""Model parameters and measure forcings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .kernels import GridSpec, KernelSpec


def _vector(x, m, name):
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.shape == (1,) and m > 1:
        v = np.full(m, v[0])
    if v.shape != (m,):
        raise ValidationError(f"{name} must have length {m}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} must be finite")
    return v


@dataclass(frozen=True)
class ModelParams:
    """Admissible tuple (b, beta, sigma, K) with initial state x0.

    ``beta`` must have nonnegative off-diagonal entries and ``b``, ``sigma``,
    ``x0`` must be nonnegative.
    """

    b: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    kernel: KernelSpec
    x0: np.ndarray

    def __post_init__(self):
        m = self.kernel.m
        b = _vector(self.b, m, "b")
        sigma = _vector(self.sigma, m, "sigma")
        x0 = _vector(self.x0, m, "x0")
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        if beta.shape != (m, m):
            raise ValidationError(f"beta must be {m}x{m}")
        if not np.all(np.isfinite(beta)):
            raise ValidationError("beta must be finite")
        if np.any(b < 0) or np.any(sigma < 0) or np.any(x0 < 0):
            raise ValidationError("b, sigma and x0 must be nonnegative")
        off = beta - np.diag(np.diag(beta))
        if np.any(off < 0):
            raise ValidationError("off-diagonal entries of beta must be nonnegative")
        for name, val in (("b", b), ("beta", beta), ("sigma", sigma), ("x0", x0)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def m(self):
        return self.kernel.m

    def replace(self, **changes):
        d = {k: getattr(self, k) for k in ("b", "beta", "sigma", "kernel", "x0")}
        d.update(changes)
        return ModelParams(**d)

    def to_dict(self):
        return {
            "b": self.b.tolist(),
            "beta": self.beta.tolist(),
            "sigma": self.sigma.tolist(),
            "x0": self.x0.tolist(),
            "kernel": self.kernel.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        kernel = KernelSpec.from_dict(d["kernel"])
        return cls(b=d["b"], beta=d["beta"], sigma=d["sigma"], kernel=kernel, x0=d["x0"])


def quadratic_map(params: ModelParams, u):
    """R_i(u) = sum_j u_j beta_ji + sigma_i^2/2 u_i^2 with the bilinear pairing.

    Works on the last axis, so ``u`` may be a stack of vectors.
    """
    u = np.asarray(u)
    return u @ params.beta + 0.5 * params.sigma**2 * u * u


def quadratic_jacobian(params: ModelParams, x):
    """DR(x) = beta^T + diag(sigma_i^2 x_i)."""
    x = np.asarray(x)
    return params.beta.T + np.diag(params.sigma**2 * x)


def _complex_vector(x, m, name):
    v = np.atleast_1d(np.asarray(x, dtype=complex))
    if v.shape == (1,) and m > 1:
        v = np.full(m, v[0])
    if v.shape != (m,):
        raise ValidationError(f"{name} must have length {m}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} must be finite")
    return v


@dataclass(frozen=True)
class MeasureForcing:
    """mu = sum_j u_j delta_{s_j} + f(t) dt with Re u_j <= 0 and Re f <= 0.

    ``density`` holds node values of f on a uniform grid of step
    ``density_step`` starting at 0 (linear in between, zero beyond).
    """

    m: int
    atoms: tuple = ()
    density: np.ndarray | None = None
    density_step: float | None = None

    def __post_init__(self):
        atoms = []
        for s, u in self.atoms:
            s = float(s)
            if not s >= 0:
                raise ValidationError("atom times must be nonnegative")
            u = _complex_vector(u, self.m, "atom weight")
            if np.any(u.real > 0):
                raise ValidationError("atom weights need nonpositive real parts")
            atoms.append((s, u))
        atoms.sort(key=lambda a: a[0])
        object.__setattr__(self, "atoms", tuple(atoms))
        if self.density is not None:
            f = np.asarray(self.density, dtype=complex)
            if f.ndim == 1:
                f = f[:, None] * np.ones(self.m)
            if f.ndim != 2 or f.shape[1] != self.m:
                raise ValidationError(f"density must have shape (n, {self.m})")
            if not np.all(np.isfinite(f)) or np.any(f.real > 0):
                raise ValidationError("density needs finite values with nonpositive real parts")
            if self.density_step is None or not self.density_step > 0:
                raise ValidationError("density needs a positive density_step")
            f.setflags(write=False)
            object.__setattr__(self, "density", f)

    @classmethod
    def zero(cls, m):
        return cls(m)

    @classmethod
    def dirac(cls, u, at=0.0):
        u = np.atleast_1d(np.asarray(u, dtype=complex))
        return cls(u.size, atoms=((at, u),))

    @property
    def is_zero(self):
        no_atoms = all(not np.any(u) for _, u in self.atoms)
        no_density = self.density is None or not np.any(self.density)
        return no_atoms and no_density

    @property
    def is_real(self):
        real_atoms = all(not np.any(u.imag) for _, u in self.atoms)
        return real_atoms and (self.density is None or not np.any(self.density.imag))

    def density_on(self, grid: GridSpec):
        """f at the nodes of ``grid``, shape (n+1, m)."""
        out = np.zeros((grid.n_steps + 1, self.m), dtype=complex)
        if self.density is None:
            return out
        src = self.density_step * np.arange(self.density.shape[0])
        t = grid.nodes
        inside = t <= src[-1] * (1 + 1e-12)
        for i in range(self.m):
            out[inside, i] = np.interp(t[inside], src, self.density[:, i].real) + 1j * np.interp(
                t[inside], src, self.density[:, i].imag
            )
        return out

    def atoms_on(self, grid: GridSpec):
        """Atoms merged by grid index; raises if an atom is off the grid."""
        merged = {}
        for s, u in self.atoms:
            k = round(s / grid.step)
            if abs(k * grid.step - s) > 0.5 * grid.step * 1e-6:
                raise ValidationError(f"atom at {s} is not on the grid of step {grid.step}")
            merged[k] = merged.get(k, 0) + u
        return dict(sorted(merged.items()))

    def total_variation(self, upto=np.inf):
        tv = sum(float(np.sum(np.abs(u))) for s, u in self.atoms if s <= upto)
        if self.density is not None:
            h = self.density_step
            t = h * np.arange(self.density.shape[0])
            a = np.sum(np.abs(self.density), axis=1)
            a = np.where(t <= upto, a, 0.0)
            tv += float(_trapezoid(a[:, None], h)[0])
        return tv

    def total_mass(self):
        """mu(R_+) as a complex m-vector."""
        tot = np.zeros(self.m, dtype=complex)
        for _, u in self.atoms:
            tot += u
        if self.density is not None:
            tot += _trapezoid(self.density, self.density_step)
        return tot

    def shifted(self, dt):
        if self.density is not None:
            raise ValidationError("only atomic forcings can be shifted")
        return MeasureForcing(self.m, atoms=tuple((s + dt, u) for s, u in self.atoms))

    def scaled(self, c):
        f = None if self.density is None else self.density * c
        return type(self)(self.m, tuple((s, u * c) for s, u in self.atoms), f, self.density_step)

    def plus(self, other: "MeasureForcing"):
        """Sum of two forcings; densities must share the same step."""
        if other.m != self.m:
            raise ValidationError("dimension mismatch")
        f, step = self.density, self.density_step
        if other.density is not None:
            if f is None:
                f, step = other.density, other.density_step
            else:
                if other.density_step != step:
                    raise ValidationError("densities must share the same step")
                n = max(f.shape[0], other.density.shape[0])
                g = np.zeros((n, self.m), dtype=complex)
                g[: f.shape[0]] += f
                g[: other.density.shape[0]] += other.density
                f = g
        return _UncheckedForcing(self.m, self.atoms + other.atoms, f, step)

    def to_dict(self):
        def cv(u):
            return [[float(z.real), float(z.imag)] for z in u]

        d = {"atoms": [{"time": s, "weight": cv(u)} for s, u in self.atoms]}
        if self.density is not None:
            d["density"] = {"step": self.density_step, "values": [cv(r) for r in self.density]}
        return d


class _UncheckedForcing(MeasureForcing):
    """Forcing built internally from validated parts (directions may have any sign)."""

    def __post_init__(self):
        atoms = sorted(((float(s), np.asarray(u, dtype=complex)) for s, u in self.atoms), key=lambda a: a[0])
        object.__setattr__(self, "atoms", tuple(atoms))
        if self.density is not None:
            object.__setattr__(self, "density", np.asarray(self.density, dtype=complex))


def direction(m, atoms=(), density=None, density_step=None):
    """A perturbation direction nu; no sign restriction."""
    return _UncheckedForcing(m, tuple(atoms), density, density_step)


def _trapezoid(y, dx):
    return 0.5 * dx * (y[0] + y[-1]) + dx * y[1:-1].sum(axis=0) if y.shape[0] > 1 else np.zeros(y.shape[1:])
