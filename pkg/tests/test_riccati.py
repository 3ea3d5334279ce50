import math

import numpy as np
import pytest

from conftest import random_params
from vsqrt.errors import ValidationError
from vsqrt.kernels import GridSpec, KernelSpec, ScalarKernel
from vsqrt.model import MeasureForcing, ModelParams, direction, quadratic_jacobian, quadratic_map
from vsqrt.resolvents import resolvent_second_kind
from vsqrt.riccati import directional_derivative, l2_norm, norm_bounds, solve_riccati, tail_integrals

CONST = KernelSpec.uniform(ScalarKernel.constant(), 1)


def ode_psi(beta, s2, u, t):
    """Closed form of psi' = beta psi + (s2/2) psi^2, psi(0) = u."""
    e = np.exp(beta * t)
    return beta * u * e / (beta + 0.5 * s2 * u * (1 - e))


def test_quadratic_map_examples():
    p1 = ModelParams(b=0, beta=-1.0, sigma=math.sqrt(2), kernel=CONST, x0=0)
    assert quadratic_map(p1, np.zeros(1)) == pytest.approx(0.0)
    assert quadratic_map(p1, np.array([-1.0]))[0] == pytest.approx(2.0)
    beta = np.array([[-1.0, 0.0], [1.0, -2.0]])
    p2 = ModelParams(b=[0, 0], beta=beta, sigma=[1, 1], kernel=KernelSpec.uniform(ScalarKernel.constant(), 2), x0=[0, 0])
    u = np.array([1j, 0])
    # R_i(u) = sum_j u_j beta_ji + sigma_i^2/2 u_i^2, expanded by hand
    R1 = u[0] * beta[0, 0] + u[1] * beta[1, 0] + 0.5 * u[0] ** 2
    R2 = u[0] * beta[0, 1] + u[1] * beta[1, 1] + 0.5 * u[1] ** 2
    np.testing.assert_allclose(quadratic_map(p2, u), [R1, R2])
    assert R1 == pytest.approx(-1j - 0.5)
    # pairing is bilinear: no conjugation
    v = np.array([1 + 1j])
    assert quadratic_map(p1, v)[0] == pytest.approx(-(1 + 1j) + (1 + 1j) ** 2)


def test_jacobian_is_analytic_derivative():
    rng = np.random.default_rng(3)
    p = random_params(rng, m=2)
    x = np.array([-0.3 + 0.2j, -1.1])
    J = quadratic_jacobian(p, x)
    eps = 1e-7
    for j in range(2):
        d = np.zeros(2)
        d[j] = eps
        fd = (quadratic_map(p, x + d) - quadratic_map(p, x - d)) / (2 * eps)
        np.testing.assert_allclose(fd, J[:, j], atol=1e-7)


def test_zero_forcing():
    p = ModelParams(b=0.2, beta=-0.5, sigma=0.4, kernel=KernelSpec.uniform(ScalarKernel.gamma(0.3, 1), 1), x0=1)
    sol = solve_riccati(p, MeasureForcing.zero(1), GridSpec.from_horizon(0.01, 2.0))
    assert np.all(sol.psi == 0)
    ts = tail_integrals(sol)
    assert np.all(ts.psi_integral == 0) and np.all(ts.psi_sq_integral == 0) and np.all(ts.R_integral == 0)


@pytest.mark.parametrize("u", [-0.5, -2.0, -1 + 1j])
def test_constant_kernel_matches_ode(u):
    beta, sigma = -1.0, 1.3
    p = ModelParams(b=0.2, beta=beta, sigma=sigma, kernel=CONST, x0=1)
    errs = []
    hs = [0.01, 0.005, 0.0025, 0.00125]
    for h in hs:
        g = GridSpec.from_horizon(h, 5.0)
        sol = solve_riccati(p, MeasureForcing.dirac([u]), g)
        ex = ode_psi(beta, sigma**2, u, g.nodes)
        e = np.max(np.abs(sol.psi[1:, 0] - ex[1:]))
        assert e <= 5 * h
        errs.append(e)
    order = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(order >= 0.9), order


def test_tail_integral_log2():
    p = ModelParams(b=0.2, beta=-1.0, sigma=math.sqrt(2), kernel=CONST, x0=1)
    sol = solve_riccati(p, MeasureForcing.dirac([-1.0]), GridSpec.from_horizon(0.01, 40.0))
    ts = tail_integrals(sol)
    assert ts.psi_integral[0].real == pytest.approx(-math.log(2), abs=1e-4)
    assert ts.converged


def test_atom_at_t_is_excluded():
    p = ModelParams(b=0, beta=0.0, sigma=0.0, kernel=CONST, x0=0)
    g = GridSpec.from_horizon(0.1, 2.0)
    sol = solve_riccati(p, MeasureForcing(1, ((1.0, [-1.0]),)), g)
    k = g.index(1.0)
    assert np.all(sol.psi[: k + 1] == 0)
    np.testing.assert_allclose(sol.psi[k + 1 :, 0], -1.0)


def test_off_grid_atom_rejected():
    p = ModelParams(b=0, beta=-1.0, sigma=0.0, kernel=CONST, x0=0)
    with pytest.raises(ValidationError):
        solve_riccati(p, MeasureForcing(1, ((0.55, [-1.0]),)), GridSpec(0.1, 10))


def test_forcing_validation():
    with pytest.raises(ValidationError):
        MeasureForcing.dirac([0.5])
    with pytest.raises(ValidationError):
        MeasureForcing(1, density=[0.1, 0.2], density_step=0.1)
    p = ModelParams(b=0, beta=-1.0, sigma=0.0, kernel=CONST, x0=0)
    with pytest.raises(ValidationError):
        solve_riccati(p, MeasureForcing.dirac([-1.0, -1.0]), GridSpec(0.1, 10))


def test_real_forcing_bounds():
    p = ModelParams(b=0.2, beta=-0.5, sigma=0.4, kernel=KernelSpec.uniform(ScalarKernel.gamma(0.3, 1), 1), x0=1)
    g = GridSpec(0.01, 500)
    for mu in [MeasureForcing.dirac([-1.0]), MeasureForcing(1, ((0, [-3]), (1, [-2])))]:
        nb = norm_bounds(solve_riccati(p, mu, g))
        assert nb["l1_ok"] and nb["l2_ok"]
    nb = norm_bounds(solve_riccati(p, MeasureForcing.dirac([-1 + 2j]), g))
    assert nb["l2_ok"] and "l1_ok" not in nb


def test_real_tail_bound():
    # |int psi| <= |mu|(R_+) int E_beta for a real scalar forcing
    p = ModelParams(b=0.2, beta=-0.5, sigma=0.4, kernel=KernelSpec.uniform(ScalarKernel.gamma(0.3, 1), 1), x0=1)
    sol = solve_riccati(p, MeasureForcing(1, ((0, [-1.5]), (0.5, [-0.5]))), GridSpec(0.01, 4000))
    assert abs(tail_integrals(sol).psi_integral[0]) <= 2.0 * (2 / 3)


def test_sign_invariant_random():
    rng = np.random.default_rng(11)
    for _ in range(15):
        p = random_params(rng)
        m = p.m
        atoms = [(0.1 * int(rng.integers(0, 10)), -rng.uniform(0, 2, m) + 1j * rng.normal(0, 2, m)) for _ in range(2)]
        f = -rng.uniform(0, 1, (5, m)) + 1j * rng.normal(0, 1, (5, m))
        mu = MeasureForcing(m, tuple(atoms), f, 0.25)
        sol = solve_riccati(p, mu, GridSpec.from_horizon(0.01, 3.0))
        assert sol.psi[1:].real.max() <= 1e-10


def _two_dim():
    spec = KernelSpec([ScalarKernel.gamma(0.3, 1.0), ScalarKernel.fractional(0.4)])
    p = ModelParams(b=[0.2, 0.1], beta=[[-1.0, 0.3], [0.5, -2]], sigma=[0.8, 0.5], kernel=spec, x0=[1, 1])
    return p, GridSpec.from_horizon(0.005, 3.0)


def test_directional_derivative_base_zero():
    p, g = _two_dim()
    u = np.array([-1.0, 0.5])
    D = directional_derivative(p, MeasureForcing.zero(2), direction(2, atoms=((0.0, u),)), g)
    E = resolvent_second_kind(p.kernel, p.beta.T, g).E_values
    ref = E[1:] @ u
    # relative error away from the singular first cells
    sel = g.nodes[1:] >= 0.05
    assert np.max(np.abs(D[1:][sel] - ref[sel])) <= 1e-3 * np.max(np.abs(ref[sel]))


def test_directional_derivative_zero_direction():
    p, g = _two_dim()
    mu = MeasureForcing(2, atoms=((0.0, [-1.0 + 1j, -0.5]),))
    D = directional_derivative(p, mu, direction(2), g)
    assert np.all(D == 0)


def test_directional_derivative_finite_difference():
    p, g = _two_dim()
    mu = MeasureForcing(2, atoms=((0.0, [-1.0 + 1j, -0.5]), (1.0, [-0.5j, -0.2])))
    nu = direction(2, atoms=((0.5, [0.3, -0.2j]), (1.0, [0.1, 0.1])))
    base = solve_riccati(p, mu.plus(nu.scaled(0.0)), g)
    D = directional_derivative(p, mu, nu, g, base)
    errs = []
    for eps in [1e-2, 1e-3, 1e-4]:
        s2 = solve_riccati(p, mu.plus(nu.scaled(eps)), g)
        errs.append(l2_norm((s2.psi - base.psi) / eps - D, g.step))
    errs = np.array(errs)
    C = errs[0] / 1e-2
    assert np.all(errs <= C * np.array([1e-2, 1e-3, 1e-4]) * 1.5)
    # the halved variant beta^T + 1/2 diag(sigma^2 psi) misses the limit by O(1)
    half = directional_derivative(p.replace(sigma=p.sigma / math.sqrt(2)), mu, nu, g, base)
    s2 = solve_riccati(p, mu.plus(nu.scaled(1e-4)), g)
    err_half = l2_norm((s2.psi - base.psi) / 1e-4 - half, g.step)
    assert err_half > 100 * errs[-1]


def test_lipschitz_in_forcing():
    p, g = _two_dim()
    mu = MeasureForcing(2, atoms=((0.0, [-1.0 + 1j, -0.5]),))
    nu = direction(2, atoms=((0.5, [-0.3, -0.2j]),))
    base = solve_riccati(p, mu, g).psi
    ratios = [l2_norm(solve_riccati(p, mu.plus(nu.scaled(e)), g).psi - base, g.step) / e for e in [0.1, 0.01, 0.001]]
    assert max(ratios) <= 2 * min(ratios)


def test_parameter_stability():
    p = ModelParams(b=0.2, beta=-0.5, sigma=0.4, kernel=KernelSpec.uniform(ScalarKernel.gamma(0.3, 1), 1), x0=1)
    g = GridSpec.from_horizon(0.01, 3.0)
    mu = MeasureForcing.dirac([-1 + 1j])
    base = solve_riccati(p, mu, g).psi
    diffs = []
    for d in [1e-1, 1e-2, 1e-3]:
        q = ModelParams(b=0.2, beta=-0.5 + d, sigma=0.4 + d, kernel=KernelSpec.uniform(ScalarKernel.gamma(0.3 + d, 1 + d), 1), x0=1)
        diffs.append(l2_norm(solve_riccati(q, mu, g).psi - base, g.step))
    assert diffs[0] > diffs[1] > diffs[2]
    assert diffs[2] < 1e-2


def test_residual_small():
    p, g = _two_dim()
    sol = solve_riccati(p, MeasureForcing(2, atoms=((0.0, [-1.0 + 1j, -0.5]),)), g)
    assert sol.residual <= g.step


def test_csv():
    p = ModelParams(b=0.2, beta=-1.0, sigma=1.0, kernel=CONST, x0=1)
    sol = solve_riccati(p, MeasureForcing.dirac([-1j]), GridSpec(0.5, 2))
    lines = sol.to_csv().splitlines()
    assert lines[0] == "t,re_psi[0],im_psi[0]"
    assert len(lines) == 4


def test_under_resolved_atom_warns():
    # H near 0.15, large sigma and a strongly oscillating atom: h = 0.01 is far too coarse
    spec = KernelSpec.uniform(ScalarKernel.gamma(0.156, 1.77), 1)
    p = ModelParams(b=0.1, beta=-1.03, sigma=1.27, kernel=spec, x0=1)
    mu = MeasureForcing.dirac([-0.26 - 3.58j])
    with pytest.warns(RuntimeWarning, match="too coarse"):
        sol = solve_riccati(p, mu, GridSpec.from_horizon(0.01, 0.5))
    assert sol.tail["sign_warning"] > 0
    fine = solve_riccati(p, mu, GridSpec.from_horizon(1 / 800, 0.5))
    assert fine.psi[1:].real.max() <= 1e-10 and "sign_warning" not in fine.tail
