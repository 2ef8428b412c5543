"""Zero-inflated negative binomial: pmf, likelihood, mean, and sampling."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import nbinom

from odforecast import autodiff as ad
from odforecast import zinb


# ---------------------------------------------------------------------------
# pmf against scipy's negative binomial (same (n, p) convention)

def test_nb_branch_matches_scipy():
    x = np.arange(0, 40, dtype=float)
    for n in (0.7, 2.0, 5.0):
        for p in (0.2, 0.5, 0.8):
            ours = zinb.log_pmf(x, n, p, 0.0)
            ref = nbinom.logpmf(x.astype(int), n, p)
            assert_allclose(ours, ref, rtol=1e-10, atol=1e-12)


def test_zero_inflation_reshapes_only_the_zero_mass():
    x = np.arange(0, 30, dtype=float)
    n, p, pi = 2.0, 0.4, 0.3
    lp = zinb.log_pmf(x, n, p, pi)
    nb = nbinom.pmf(x.astype(int), n, p)
    assert_allclose(np.exp(lp[0]), pi + (1 - pi) * nb[0], rtol=1e-12)
    assert_allclose(np.exp(lp[1:]), (1 - pi) * nb[1:], rtol=1e-10)


def test_hand_value_at_zero():
    # n=1, p=0.5, pi=0.5: P(0) = 0.5 + 0.5*0.5 = 0.75
    assert_allclose(zinb.log_pmf(np.array([0.0]), 1.0, 0.5, 0.5),
                    [math.log(0.75)], rtol=1e-15)


def test_pi_zero_reduces_to_plain_nb_exactly():
    x = np.arange(0, 25, dtype=float)
    ours = zinb.log_pmf(x, 3.0, 0.4, 0.0)
    plain = zinb.nb_log_pmf(x, 3.0, 0.4)
    assert np.array_equal(ours, plain)


def test_truncated_mass_sums_to_one():
    x = np.arange(0, 3000, dtype=float)
    for n in (0.5, 2.0, 8.0):
        for p in (0.3, 0.6):
            for pi in (0.0, 0.5):
                mass = np.exp(zinb.log_pmf(x, n, p, pi)).sum()
                assert mass >= 1.0 - 1e-6


def test_parameter_validation():
    x = np.array([1.0])
    with pytest.raises(ValueError):
        zinb.log_pmf(x, -1.0, 0.5, 0.0)
    with pytest.raises(ValueError):
        zinb.log_pmf(x, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        zinb.log_pmf(x, 1.0, 1.5, 0.0)
    with pytest.raises(ValueError):
        zinb.log_pmf(x, 1.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        zinb.log_pmf(np.array([-1.0]), 1.0, 0.5, 0.0)
    with pytest.raises(ValueError):
        zinb.log_pmf(np.array([1.5]), 1.0, 0.5, 0.0)


# ---------------------------------------------------------------------------
# mean

def test_mean_formula_and_inflated_variant():
    assert_allclose(zinb.mean(3.0, 0.4), 3.0 * 0.6 / 0.4, rtol=1e-15)
    assert_allclose(zinb.mean(3.0, 0.4, 0.25, zero_inflated=True),
                    0.75 * 4.5, rtol=1e-15)


def test_mean_against_monte_carlo():
    rng = np.random.default_rng(0)
    sample = rng.negative_binomial(3.0, 0.4, size=200_000)
    assert abs(sample.mean() - zinb.mean(3.0, 0.4)) / zinb.mean(3.0, 0.4) < 0.01


def test_sampler_respects_inflation():
    rng = np.random.default_rng(1)
    draws = zinb.sample(rng, 5.0, 0.3, 0.5, size=100_000)
    # zero fraction ~ pi + (1-pi) * p^n
    expected_zero = 0.5 + 0.5 * 0.3 ** 5
    assert abs((draws == 0).mean() - expected_zero) < 0.01
    assert_allclose(draws.mean(), 0.5 * zinb.mean(5.0, 0.3), rtol=0.05)


# ---------------------------------------------------------------------------
# differentiable negative log likelihood

def numpy_nll(x, n, p, pi):
    total = 0.0
    for xi, ni, pi_, qi in zip(x.ravel(), n.ravel(), p.ravel(), pi.ravel()):
        total -= zinb.log_pmf(np.array([xi]), float(ni), float(pi_), float(qi))[0]
    return total


def test_nll_matches_numpy_oracle():
    rng = np.random.default_rng(2)
    shape = (4, 5)
    x = rng.poisson(2.0, size=shape).astype(float)
    n = rng.uniform(0.5, 5.0, size=shape)
    p = rng.uniform(0.2, 0.8, size=shape)
    pi = rng.uniform(0.05, 0.6, size=shape)
    params = zinb.ZINBParams(ad.Tensor(n), ad.Tensor(p), ad.Tensor(pi))
    got = zinb.nll(x, params).item()
    assert_allclose(got, numpy_nll(x, n, p, pi), rtol=1e-10)


def test_nll_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    shape = (3, 3)
    x = rng.poisson(2.0, size=shape).astype(float)
    point = {
        "n": rng.uniform(0.5, 4.0, size=shape),
        "p": rng.uniform(0.25, 0.75, size=shape),
        "pi": rng.uniform(0.1, 0.5, size=shape),
    }

    def f(t):
        return zinb.nll(x, zinb.ZINBParams(t["n"], t["p"], t["pi"]))

    report = ad.grad_check(f, point, tol=1e-6)
    assert report.passed, str(report)


def test_nll_finite_at_domain_edges():
    # pi at its floor and p near saturation must stay differentiable
    x = np.array([[0.0, 3.0]])
    n = ad.Tensor(np.full((1, 2), 1e-6), requires_grad=True)
    p = ad.Tensor(np.array([[1e-6, 1.0 - 1e-6]]), requires_grad=True)
    pi = ad.Tensor(np.full((1, 2), 1e-12), requires_grad=True)
    loss = zinb.nll(x, zinb.ZINBParams(n, p, pi))
    assert math.isfinite(loss.item())
    loss.backward()
    for t in (n, p, pi):
        assert np.isfinite(t.grad).all()


def test_nll_rejects_bad_counts():
    params = zinb.ZINBParams(ad.Tensor(np.ones((1,))),
                             ad.Tensor(np.full((1,), 0.5)),
                             ad.Tensor(np.full((1,), 0.1)))
    with pytest.raises(ValueError):
        zinb.nll(np.array([-1.0]), params)
    with pytest.raises(ValueError):
        zinb.nll(np.array([0.5]), params)
