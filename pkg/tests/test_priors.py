import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from geodose.priors import (
    NoisePrior,
    PCPrior,
    default_field_prior,
    extended_field_priors,
    grad_log_beta_prior,
    log_beta_prior,
    log_noise_prior,
    log_pc_prior,
)


def test_median_range_from_tail_statement():
    p = default_field_prior()
    assert p.range_median() == pytest.approx(15_000.0, rel=1e-12)


def test_median_by_numerical_integration():
    p = default_field_prior()
    # integrate the range density over log(rho) to avoid the sharp left tail
    f = lambda s: math.exp(float(p.log_density_range(math.exp(s))) + s)
    mass, _ = integrate.quad(f, math.log(1.0), math.log(15_000.0), limit=200)
    assert mass == pytest.approx(0.5, abs=1e-8)


def test_sigma_tail_is_exponential():
    p = default_field_prior()
    assert p.lam_sigma == pytest.approx(-math.log(0.01) / 10.0, rel=1e-15)
    assert math.exp(-p.lam_sigma * 10.0) == pytest.approx(0.01, rel=1e-14)
    f = lambda s: math.exp(float(p.log_density_sigma(s)))
    tail, _ = integrate.quad(f, 10.0, np.inf)
    assert tail == pytest.approx(0.01, rel=1e-8)


@pytest.mark.parametrize("prior", [default_field_prior(), *extended_field_priors()])
def test_joint_density_integrates_to_one(prior):
    def f(ls, lr):
        return math.exp(float(log_pc_prior(math.exp(lr), math.exp(ls), prior)) + lr + ls)

    lo = math.log(prior.range_median()) - 12
    hi = math.log(prior.range_median()) + 40
    total, _ = integrate.dblquad(f, lo, hi, -25.0, 8.0, epsabs=1e-10, epsrel=1e-10)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_extended_priors_tails():
    long, short = extended_field_priors()
    assert float(long.range_cdf(15_000.0)) == pytest.approx(0.4, rel=1e-12)
    assert 1 - float(short.range_cdf(2_000.0)) == pytest.approx(0.02, rel=1e-12)


def test_noise_shape_one_is_exponential():
    p = NoisePrior(1.0, 5e-5)
    x = np.array([1e-6, 1.0, 10.0, 100.0])
    d = np.exp(log_noise_prior(x, p))
    assert np.all(np.diff(d) < 0)  # mode at zero
    np.testing.assert_allclose(d, 5e-5 * np.exp(-5e-5 * x), rtol=1e-13)


def test_noise_log_linear():
    p = NoisePrior(1.0, 5e-5)
    diff = float(log_noise_prior(40.0, p) - log_noise_prior(20.0, p))
    assert diff == pytest.approx(-5e-5 * 20.0, rel=1e-12)


def test_noise_tail_at_fitted_precision():
    p = NoisePrior(1.0, 5e-5)
    assert p.survival(36.0) == pytest.approx(math.exp(-36 * 5e-5), rel=1e-15)
    assert p.survival(36.0) == pytest.approx(0.9982, abs=1e-4)


def test_noise_scale_parametrization():
    a = NoisePrior(2.0, 4.0, "scale")
    b = NoisePrior(2.0, 0.25, "rate")
    assert float(a.log_density(3.0)) == pytest.approx(float(b.log_density(3.0)))
    assert a.survival(3.0) == pytest.approx(b.survival(3.0))


def test_beta_prior_at_zero():
    for p in (1, 5, 29):
        assert log_beta_prior(np.zeros(p)) == pytest.approx(p * -0.5 * math.log(2 * math.pi * 1000), rel=1e-14)


def test_beta_prior_adds_one_term_per_coefficient(rng):
    b = rng.normal(size=4)
    extra = 1.7
    lhs = log_beta_prior(np.append(b, extra)) - log_beta_prior(b)
    rhs = -0.5 * math.log(2 * math.pi * 1000) - 0.5 * extra**2 / 1000
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_beta_gradient_finite_difference(rng):
    b = rng.normal(scale=3, size=6)
    g = grad_log_beta_prior(b)
    np.testing.assert_allclose(g, -b / 1000, rtol=1e-15)
    h = 1e-6
    fd = np.array([(log_beta_prior(b + h * e) - log_beta_prior(b - h * e)) / (2 * h) for e in np.eye(6)])
    np.testing.assert_allclose(fd, g, rtol=1e-5, atol=1e-9)


@pytest.mark.parametrize(
    "args",
    [(-1.0, 0.5, 10.0, 0.01), (15_000.0, 0.0, 10.0, 0.01), (15_000.0, 0.5, 10.0, 1.0), (15_000.0, 0.5, 0.0, 0.01)],
)
def test_invalid_pc_prior(args):
    with pytest.raises(ValueError):
        PCPrior(*args)


def test_density_domain_errors():
    p = default_field_prior()
    with pytest.raises(ValueError):
        p.log_density_range(0.0)
    with pytest.raises(ValueError):
        p.log_density_sigma(-1.0)
    with pytest.raises(ValueError):
        NoisePrior(1.0, 5e-5, "precision")


@settings(max_examples=100, deadline=None)
@given(st.floats(1.0, 1e7), st.floats(1.0, 1e7))
def test_range_cdf_monotone(r1, r2):
    p = default_field_prior()
    lo, hi = sorted([r1, r2])
    c_lo, c_hi = float(p.range_cdf(lo)), float(p.range_cdf(hi))
    assert 0.0 <= c_lo <= c_hi <= 1.0
