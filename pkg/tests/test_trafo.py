import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, stats
from scipy.special import expit

from dtm.latent import LatentDistribution
from dtm.netcore import Tensor, backward, numeric_gradient, parameter
from dtm.trafo import (BernsteinBasis, CutpointVector, bernstein_basis, censored_log_prob,
                       class_probs_from_cutpoints, collapse_to_binary, exact_log_density,
                       exact_loglik, gammas_from_thetas, nll, ordered_cutpoints, ordinal_class_probs,
                       ordinal_loglik, thetas_from_gammas)

KINDS = ["logistic", "normal", "mev"]
gam = arrays(np.float64, st.integers(1, 7), elements=st.floats(-3, 3))


@settings(max_examples=60, deadline=None)
@given(gam)
def test_cutpoints_strictly_increasing_and_invertible(g):
    t = thetas_from_gammas(g)
    assert np.all(np.diff(t) > 0)
    np.testing.assert_allclose(gammas_from_thetas(t), g, atol=1e-9)


def test_gammas_reject_non_increasing():
    with pytest.raises(ValueError):
        gammas_from_thetas([0.0, 0.0, 1.0])
    cv = CutpointVector.from_thetas([-1.0, 0.5, 2.0])
    assert cv.n_classes == 4
    np.testing.assert_allclose(cv.thetas, [-1.0, 0.5, 2.0])


def test_ordered_cutpoints_gradient():
    g = parameter(np.random.default_rng(0).normal(size=(3, 5)), "g")
    w = np.random.default_rng(1).normal(size=(3, 5))
    loss = lambda: (ordered_cutpoints(g) * Tensor(w)).sum()
    grads = backward(loss(), {"g": g})["g"]
    for idx in np.ndindex(g.shape):
        assert grads[idx] == pytest.approx(numeric_gradient(lambda: float(loss().data), g, idx), rel=1e-6)


@pytest.mark.parametrize("kind", KINDS)
@settings(max_examples=40, deadline=None)
@given(g=arrays(np.float64, 6, elements=st.floats(-2, 1.5)), shift=st.floats(-4, 4))
def test_class_probs_sum_to_one(kind, g, shift):
    p = ordinal_class_probs(CutpointVector(g), shift, kind, clamp=False)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(p >= 0)


def test_class_probs_match_cdf_differences():
    th = np.array([-1.0, 0.0, 0.7, 2.0])
    p = ordinal_class_probs(th, 0.3, "normal")
    cdf = stats.norm.cdf(np.r_[-np.inf, th - 0.3, np.inf])
    np.testing.assert_allclose(p, np.diff(cdf), rtol=1e-12)


def test_binary_logistic_loglik_is_log_expit():
    h = Tensor(np.array([[0.3], [-1.2], [2.0]]))
    y = np.array([0, 1, 0])
    ll = ordinal_loglik(h, y, LatentDistribution("logistic")).data
    np.testing.assert_allclose(ll, np.log([expit(0.3), 1 - expit(-1.2), expit(2.0)]), rtol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_ordinal_loglik_gradient(kind):
    rng = np.random.default_rng(2)
    h = parameter(np.sort(rng.normal(size=(8, 4)), axis=1), "h")
    y = rng.integers(0, 5, size=8)
    d = LatentDistribution(kind)
    loss = lambda: ordinal_loglik(h, y, d).sum()
    grads = backward(loss(), {"h": h})["h"]
    for idx in np.ndindex(h.shape):
        num = numeric_gradient(lambda: float(loss().data), h, idx)
        assert grads[idx] == pytest.approx(num, rel=1e-5, abs=1e-8)


def test_ordinal_loglik_rejects_bad_class():
    with pytest.raises(ValueError):
        ordinal_loglik(Tensor(np.zeros((1, 2))), [3], LatentDistribution())


def test_nll_and_censoring_errors():
    with pytest.raises(ValueError):
        nll([])
    assert nll([-1.0, -3.0]) == 2.0
    with pytest.raises(ValueError):
        censored_log_prob(0.0, 1.0)


@pytest.mark.parametrize("kind", KINDS)
def test_collapse_equals_censored_probability(kind):
    rng = np.random.default_rng(3)
    h = np.sort(rng.normal(size=(20, 6)), axis=1) * 2
    p = class_probs_from_cutpoints(h, kind, clamp=False)
    fav, unfav = collapse_to_binary(p, 2)
    d = LatentDistribution(kind)
    np.testing.assert_allclose(np.log(fav), censored_log_prob(h[:, 2], -np.inf, d), atol=1e-12)
    np.testing.assert_allclose(np.log(unfav), censored_log_prob(np.inf, h[:, 2], d), atol=1e-12)
    with pytest.raises(ValueError):
        collapse_to_binary(p, 6)


# --- Bernstein baseline ------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(t=st.floats(0, 1), order=st.integers(1, 10))
def test_bernstein_partition_of_unity(t, order):
    b = bernstein_basis(t, order)
    assert b.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(b >= -1e-15)


@settings(max_examples=30, deadline=None)
@given(raw=arrays(np.float64, 7, elements=st.floats(-2, 2)))
def test_bernstein_h_monotone(raw):
    basis = BernsteinBasis(6, -1.0, 3.0, raw)
    y = np.linspace(-1, 3, 200)
    assert np.all(np.diff(basis.h(y)) >= -1e-12)
    assert np.all(basis.h_prime(y) > 0)


def test_bernstein_derivative_matches_finite_difference():
    basis = BernsteinBasis(6, 0.0, 10.0, np.random.default_rng(4).normal(size=7))
    y = np.linspace(0.5, 9.5, 13)
    num = (basis.h(y + 1e-6) - basis.h(y - 1e-6)) / 2e-6
    np.testing.assert_allclose(basis.h_prime(y), num, rtol=1e-6)


def test_bernstein_support_and_clamping():
    y = np.array([2.0, 5.0, 12.0])
    basis = BernsteinBasis.for_outcome(y)
    assert basis.order == 6
    assert basis.lower == pytest.approx(2.0 - 0.1) and basis.upper == pytest.approx(12.0 + 0.1)
    with pytest.warns(RuntimeWarning):
        basis.h([100.0])
    coefs = np.array([-2.0, -1.0, 0.0, 0.5, 1.0, 3.0, 4.0])
    np.testing.assert_allclose(BernsteinBasis.from_coefficients(coefs, 0, 1).coefficients, coefs)


@pytest.mark.parametrize("kind", KINDS)
def test_exact_density_integrates_to_transformed_mass(kind):
    coefs = np.array([-4.0, -2.5, -1.0, 0.0, 1.0, 2.0, 4.0])
    basis = BernsteinBasis.from_coefficients(coefs, 0.0, 10.0)
    d = LatentDistribution(kind)
    mass, _ = integrate.quad(lambda v: float(np.exp(exact_log_density(basis, 0.4, v, d))), 0, 10,
                             limit=200, epsabs=1e-12)
    expected = float(d.cdf(basis.h(10.0) - 0.4) - d.cdf(basis.h(0.0) - 0.4))
    assert mass == pytest.approx(expected, abs=1e-9)


def test_exact_loglik_gradient():
    rng = np.random.default_rng(5)
    y = rng.uniform(0.5, 9.5, size=10)
    basis = BernsteinBasis.for_outcome(np.r_[0.0, 10.0, y])
    raw = parameter(rng.normal(size=7) * 0.3, "raw")
    shift = parameter(rng.normal(size=(10, 1)), "shift")
    d = LatentDistribution("normal")
    loss = lambda: exact_loglik(raw, shift, y, basis, d).sum()
    grads = backward(loss(), {"raw": raw, "shift": shift})
    for name, p in (("raw", raw), ("shift", shift)):
        for idx in np.ndindex(p.shape):
            num = numeric_gradient(lambda: float(loss().data), p, idx)
            assert grads[name][idx] == pytest.approx(num, rel=1e-5, abs=1e-8)
    direct = exact_log_density(BernsteinBasis(6, basis.lower, basis.upper, raw.data), shift.data[:, 0], y, d)
    np.testing.assert_allclose(loss().data, direct.sum(), rtol=1e-12)
