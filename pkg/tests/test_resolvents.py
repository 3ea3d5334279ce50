import math

import numpy as np
import pytest

from vsqrt.errors import ValidationError
from vsqrt.kernels import GridSpec, KernelSpec, ScalarKernel
from vsqrt.resolvents import closed_form_E_fractional, resolvent_integrals, resolvent_second_kind

CONST = KernelSpec.uniform(ScalarKernel.constant(), 1)
GAMMA = KernelSpec.uniform(ScalarKernel.gamma(0.3, 1.0), 1)


def test_constant_kernel_is_exponential():
    g = GridSpec.from_horizon(0.01, 10.0)
    pair = resolvent_second_kind(CONST, [[-1.0]], g)
    ex = np.exp(-g.nodes)
    assert np.max(np.abs(pair.E_values[:, 0, 0] - ex)) <= 2 * g.step
    assert np.max(np.abs(pair.R_values[:, 0, 0] - ex)) <= 2 * g.step


def test_zero_B():
    g = GridSpec.from_horizon(0.01, 3.0)
    pair = resolvent_second_kind(GAMMA, [[0.0]], g)
    assert np.all(pair.R_values[1:] == 0)  # t = 0 is singular and stored as NaN
    np.testing.assert_allclose(pair.E_values[1:, 0, 0], GAMMA.components[0].eval(g.nodes[1:]), rtol=1e-12)


def test_gamma_matches_mittag_leffler():
    g = GridSpec.from_horizon(1e-3, 20.0)
    pair = resolvent_second_kind(GAMMA, [[-0.5]], g)
    t = g.nodes
    sel = t >= 0.1
    ex = closed_form_E_fractional(0.3, 1.0, -0.5, t[sel])
    np.testing.assert_allclose(pair.E_values[sel, 0, 0], ex, rtol=1e-4)


def test_integrals_examples():
    pair = resolvent_second_kind(GAMMA, [[-0.5]], GridSpec.from_horizon(1e-3, 60.0))
    ri = resolvent_integrals(pair)
    assert ri.E_integral[0, 0] == pytest.approx(2 / 3, abs=1e-3)
    assert ri.R_integral[0, 0] == pytest.approx(1 / 3, abs=1e-3)
    assert ri.integrable and not ri.divergent
    ri = resolvent_integrals(resolvent_second_kind(CONST, [[-1.0]], GridSpec.from_horizon(1e-3, 40.0)))
    assert ri.E_integral[0, 0] == pytest.approx(1.0, abs=1e-3)
    assert ri.R_integral[0, 0] == pytest.approx(1.0, abs=1e-3)


def test_fractional_slow_tail():
    spec = KernelSpec.uniform(ScalarKernel.fractional(0.3), 1)
    ri = resolvent_integrals(resolvent_second_kind(spec, [[-1.0]], GridSpec(0.025, 20000)))
    assert ri.slow_convergence
    assert ri.R_integral[0, 0] == pytest.approx(1.0, abs=5e-3)
    assert ri.E_integral[0, 0] == pytest.approx(1.0, abs=5e-3)


def test_divergent_flag():
    spec = KernelSpec.uniform(ScalarKernel.fractional(0.3), 1)
    ri = resolvent_integrals(resolvent_second_kind(spec, [[0.0]], GridSpec.from_horizon(0.01, 100.0)))
    assert ri.divergent and np.isnan(ri.E_integral).all()


def test_closed_form_examples():
    assert closed_form_E_fractional(0.5, 0.0, -1.0, 2.0) == pytest.approx(math.exp(-2), rel=1e-12)
    assert closed_form_E_fractional(0.5, 1.0, -1.0, 1.0) == pytest.approx(math.exp(-2), rel=1e-12)
    t = np.geomspace(50, 500, 10)
    ratio = closed_form_E_fractional(0.3, 0.0, -1.0, t) / t**-1.8
    assert ratio.min() > 0 and ratio.max() / ratio.min() < 1.5
    slope = np.polyfit(np.log(t), np.log(closed_form_E_fractional(0.3, 0.0, -1.0, t)), 1)[0]
    assert slope == pytest.approx(-1.8, abs=0.05)
    with pytest.raises(ValidationError):
        closed_form_E_fractional(0.3, 0.0, -1.0, 0.0)
    with pytest.raises(ValidationError):
        closed_form_E_fractional(0.3, 0.0, 1.0, 1.0)


def test_identity_and_transpose():
    spec = KernelSpec([ScalarKernel.gamma(0.3, 1.0), ScalarKernel.fractional(0.2)])
    B = np.array([[-1.0, 0.4], [0.7, -2.0]])
    g = GridSpec.from_horizon(0.01, 5.0)
    pair = resolvent_second_kind(spec, B, g)
    pT = resolvent_second_kind(spec, B.T, g)
    for k in range(1, g.n_steps + 1):
        R, E = pair.R_values[k], pair.E_values[k]
        assert np.linalg.norm(E @ -B - R) <= 1e-8 * np.linalg.norm(R)
        assert np.linalg.norm(pT.E_values[k].T - E) <= 1e-8 * np.linalg.norm(E)


def test_cone_invariance():
    spec = KernelSpec([ScalarKernel.gamma(0.2, 0.5), ScalarKernel.fractional(0.4)])
    beta = np.array([[-1.0, 0.4], [0.7, -0.5]])
    pair = resolvent_second_kind(spec, beta, GridSpec.from_horizon(0.01, 20.0))
    assert pair.E_cumulative.min() >= -1e-8
    assert (np.eye(2) - pair.R_cumulative).min() >= -1e-8


def test_scalar_constant_R_bounds():
    for beta in [-0.1, -1.0, -5.0]:
        pair = resolvent_second_kind(CONST, [[beta]], GridSpec.from_horizon(0.01, 20.0))
        FR = pair.R_cumulative[:, 0, 0]
        assert FR.min() >= -1e-12 and FR.max() <= 1 + 1e-12


def test_defining_relation_residual():
    # integrated scalar form of R + K_B * R = K_B:  F(t) - B int_0^t E(s) IK(t - s) ds = IK(t)
    errs = []
    for h in [0.02, 0.01]:
        g = GridSpec.from_horizon(h, 4.0)
        B = -0.5
        pair = resolvent_second_kind(GAMMA, [[B]], g)
        k = GAMMA.components[0]
        t = g.nodes
        dF = pair.E_increments[1:, 0, 0]
        F = pair.E_cumulative[:, 0, 0]
        mid = 0.5 * (t[1:] + t[:-1])
        res = [F[n] - B * np.dot(dF[:n], k.integral(t[n] - mid[:n])) - k.integral(t[n]) for n in range(1, g.n_steps + 1)]
        errs.append(h * np.sum(np.abs(res)))
    assert errs[1] <= 5 * 0.01
    assert errs[1] < errs[0]


def test_convergence_order():
    errs = []
    for h in [0.02, 0.01, 0.005, 0.0025]:
        g = GridSpec.from_horizon(h, 10.0)
        E = resolvent_second_kind(CONST, [[-1.0]], g).E_values[:, 0, 0]
        d = np.abs(E - np.exp(-g.nodes))
        errs.append(h * (d.sum() - 0.5 * (d[0] + d[-1])))
    ratios = np.array(errs[:-1]) / errs[1:]
    assert np.all(ratios >= 1.7), ratios
    # second-order scheme: report the ratio, the first-order band is a floor only
    assert np.all(ratios <= 4.6), ratios


def test_appendix_square_bound():
    # int_s^t |E|^2 <= C (t - s)^gamma with gamma = 2H and C measured on small windows
    g = GridSpec.from_horizon(0.001, 5.0)
    pair = resolvent_second_kind(GAMMA, [[-0.5]], g)
    k = GAMMA.components[0]
    C = k.square_integral(1.0) * 3
    E2 = pair.E_values[1:, 0, 0] ** 2
    cum = np.concatenate([[k.square_integral(g.step)], k.square_integral(g.step) + g.step * np.cumsum(0.5 * (E2[:-1] + E2[1:]))])
    for s_idx, t_idx in [(0, 10), (0, 1000), (100, 200), (2000, 4999)]:
        lhs = cum[t_idx] - (cum[s_idx] if s_idx else 0.0)
        assert lhs <= C * ((t_idx - s_idx + 1) * g.step) ** 0.6


def test_validation():
    with pytest.raises(ValidationError):
        resolvent_second_kind(GAMMA, np.eye(2), GridSpec(0.1, 10))
    with pytest.raises(ValidationError):
        resolvent_second_kind(GAMMA, [[np.nan]], GridSpec(0.1, 10))


def test_csv_header():
    pair = resolvent_second_kind(KernelSpec.uniform(ScalarKernel.constant(), 2), -np.eye(2), GridSpec(0.5, 2))
    lines = pair.to_csv().splitlines()
    assert lines[0] == "t,R[0][0],R[0][1],R[1][0],R[1][1],E[0][0],E[0][1],E[1][0],E[1][1]"
    assert len(lines) == 4
