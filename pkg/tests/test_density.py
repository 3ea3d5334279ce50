import numpy as np
import pytest
from scipy import integrate, stats

from conftest import scalar_model
from vsqrt.density import (
    besov_increment_curve,
    increment_integral,
    limit_density_diagnostics,
    shift_ladder,
    weight,
    weighted_density,
)
from vsqrt.errors import NumericalError, ValidationError
from vsqrt.kernels import ScalarKernel

N = 100_000


def weighted_bin_average(edges, dist):
    f = lambda y: min(1.0, np.sqrt(y)) * dist.pdf(y)
    mass = [integrate.quad(f, a, b)[0] for a, b in zip(edges[:-1], edges[1:])]
    return np.array(mass) / np.diff(edges)


def l1(wd, dist):
    return float(np.abs(wd.values - weighted_bin_average(wd.edges[0], dist)).sum() * wd.bin_width[0])


def test_weight():
    x = np.array([[0.0, 4.0], [0.25, 9.0], [2.0, 3.0]])
    np.testing.assert_allclose(weight(x), [0.0, 0.5, 1.0])


def test_all_zero_samples():
    wd = weighted_density(np.zeros(N))
    assert wd.atom_mass_at_zero == 1.0 and wd.degenerate
    assert wd.histogram_mass == 0.0
    assert np.all(wd.values == 0)


def test_exponential_law():
    # law of a squared Bessel process of dimension 2 started at zero
    dist = stats.expon(scale=0.25)
    wd = weighted_density(dist.rvs(N, random_state=np.random.default_rng(0)))
    assert l1(wd, dist) < 0.02
    assert wd.atom_mass_at_zero == pytest.approx(dist.cdf(wd.bin_width[0]), abs=4 * wd.atom_se)


def test_mass_bookkeeping():
    x = stats.gamma(0.7).rvs(N, random_state=np.random.default_rng(1))
    wd = weighted_density(x)
    assert wd.atom_mass_at_zero + wd.histogram_mass == 1.0
    total = wd.values.sum() * wd.bin_width[0]
    assert total == pytest.approx(wd.weighted_mass, rel=1e-12)
    assert wd.weighted_mass <= 1.0


def test_two_dimensional():
    rng = np.random.default_rng(2)
    x = rng.exponential(1.0, size=(N, 2))
    wd = weighted_density(x)
    assert wd.values.ndim == 2
    assert wd.values.sum() * np.prod(wd.bin_width) == pytest.approx(wd.weighted_mass, rel=1e-12)
    with pytest.raises(ValidationError):
        weighted_density(rng.exponential(size=(10, 3)))


def test_uniform_density_exponent():
    # jumps at both ends make the increments linear in the shift
    x = stats.uniform(1.0, 1.0).rvs(N, random_state=np.random.default_rng(3))
    wd = weighted_density(x, bins=0.02)
    curve = besov_increment_curve(wd, 0.02 * np.array([4, 8, 16, 32]))
    np.testing.assert_allclose(curve.integrals, 2 * curve.shifts, rtol=0.15)
    assert curve.exponent == pytest.approx(1.0, abs=0.1)


def test_subadditivity():
    x = stats.gamma(1.5).rvs(N, random_state=np.random.default_rng(4))
    wd = weighted_density(x)
    for k in [4, 7, 11]:
        assert increment_integral(wd, 2 * k) <= 2 * increment_integral(wd, k) + 1e-12


def test_shift_rules():
    wd = weighted_density(stats.expon().rvs(N, random_state=np.random.default_rng(5)), bins=0.05)
    with pytest.raises(ValidationError):
        besov_increment_curve(wd, [0.15])
    with pytest.raises(ValidationError):
        besov_increment_curve(wd, [0.21])
    with pytest.raises(ValidationError):
        besov_increment_curve(wd, [2.0])
    ladder = shift_ladder(wd)
    assert ladder.min() == pytest.approx(0.2) and ladder.max() <= 1.0 + 1e-12
    assert besov_increment_curve(wd, ladder).applicable


def test_small_sample_warns():
    with pytest.warns(UserWarning):
        wd = weighted_density(np.linspace(0.1, 1, 100))
    assert wd.notes


def test_limit_requires_certificate():
    p = scalar_model(ScalarKernel.fractional(0.3), beta=0.5)
    with pytest.raises(NumericalError):
        limit_density_diagnostics(p, 10.0, n_samples=100)


def test_limit_degenerate():
    p = scalar_model(ScalarKernel.gamma(0.3, 1.0), sigma=0.0)
    rep = limit_density_diagnostics(p, 5.0, n_samples=10_000)
    assert rep.degenerate and not rep.curve.applicable


def test_limit_without_drift_concentrates_at_zero():
    p = scalar_model(ScalarKernel.constant(), beta=-1.0, b=0.0, sigma=1.0)
    atoms = [limit_density_diagnostics(p, t, n_samples=20_000, seed=1).density.atom_mass_at_zero for t in (2.0, 30.0)]
    assert atoms[0] < atoms[1] == 1.0


def test_cir_stationary_law():
    p = scalar_model(ScalarKernel.constant(), beta=-1.0, b=0.5, sigma=1.0)
    rep = limit_density_diagnostics(p, 20.0, n_samples=N, seed=1, step=1 / 50)
    # Gamma(2b/sigma^2, sigma^2/(2|beta|)); exact samples alone give about 0.013
    assert l1(rep.density, stats.gamma(1.0, scale=0.5)) < 0.025
