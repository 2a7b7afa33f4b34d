import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pickleflow import gpr

# (1 + sqrt5 + 5/3) exp(-sqrt5), evaluated independently in extended precision
MATERN_AT_ELL = 0.52399410883182


def test_kernel_values():
    p = gpr.Matern52Params(1.0, 1.0)
    assert gpr.matern52(0.0, p) == 1.0
    assert gpr.matern52(1.0, p) == pytest.approx(MATERN_AT_ELL, rel=1e-12)
    assert gpr.matern52(100.0, p) < 1e-40
    p2 = gpr.Matern52Params(2.0, 0.5)
    assert gpr.matern52(0.5, p2) == pytest.approx(4 * MATERN_AT_ELL, rel=1e-12)


def test_kernel_oracle_mpmath():
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 30
    a = mp.sqrt(5)
    exact = (1 + a + mp.mpf(5) / 3) * mp.e ** (-a)
    assert float(exact) == pytest.approx(MATERN_AT_ELL, rel=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 5), st.floats(0.05, 3),
       st.lists(st.floats(0, 20), min_size=2, max_size=20))
def test_kernel_monotone_and_bounded(sigma, ell, rs):
    p = gpr.Matern52Params(sigma, ell)
    r = np.sort(np.array(rs))
    k = gpr.matern52(r, p)
    assert np.all(k <= sigma ** 2 * (1 + 1e-15))
    assert np.all(k >= 0)
    assert np.all(np.diff(k) <= 1e-15)


def test_invalid_params():
    with pytest.raises(ValueError):
        gpr.Matern52Params(0.0, 1.0)
    with pytest.raises(ValueError):
        gpr.Matern52Params(1.0, -1.0)
    with pytest.raises(ValueError):
        gpr.Matern52Params(1.0, 1.0, -1e-3)


def test_params_json_round_trip():
    p = gpr.Matern52Params(1.3, 0.2, 1e-8)
    assert gpr.Matern52Params.from_json(p.to_json()) == p


def _draw(n, sigma, ell, seed):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 2))
    K = gpr.covariance_matrix(X, X, gpr.Matern52Params(sigma, ell))
    K[np.diag_indices_from(K)] += 1e-10
    return X, np.linalg.cholesky(K) @ rng.standard_normal(n)


def test_fit_recovers_known_parameters():
    X, v = _draw(200, 1.5, 0.3, 11)
    p = gpr.fit_hyperparameters(X, v)
    assert 1.5 / 1.5 <= p.sigma <= 1.5 * 1.5
    assert 0.3 / 1.5 <= p.ell <= 0.3 * 1.5
    assert p.nugget == pytest.approx(1e-8 * p.sigma ** 2)


def test_fit_scale_equivariance():
    X, v = _draw(60, 1.0, 0.25, 3)
    p1 = gpr.fit_hyperparameters(X, v)
    p2 = gpr.fit_hyperparameters(X, 7.0 * v)
    assert p2.sigma == pytest.approx(7.0 * p1.sigma, rel=1e-6)
    assert p2.ell == pytest.approx(p1.ell, rel=1e-6)


def test_fit_is_local_minimum():
    X, v = _draw(50, 1.0, 0.2, 5)
    p = gpr.fit_hyperparameters(X, v)
    f0 = gpr.negative_log_likelihood(p, X, v)
    for ds, dl in ((1.02, 1), (0.98, 1), (1, 1.02), (1, 0.98)):
        q = gpr.Matern52Params(p.sigma * ds, p.ell * dl, 1e-8 * (p.sigma * ds) ** 2)
        assert gpr.negative_log_likelihood(q, X, v) >= f0 - 1e-8


def test_nll_gradient_matches_finite_differences():
    X, v = _draw(30, 1.0, 0.3, 9)
    from scipy.spatial.distance import cdist

    dist = cdist(X, X)
    theta = np.array([0.1, np.log(0.25)])
    f, g = gpr._nll_and_grad(theta, dist, v, 1.0)
    h = 1e-6
    fd = [(gpr._nll_and_grad(theta + h * e, dist, v, 1.0)[0]
           - gpr._nll_and_grad(theta - h * e, dist, v, 1.0)[0]) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(g, fd, rtol=1e-5)


def test_degenerate_data_flagged():
    with pytest.warns(gpr.DegenerateDataWarning):
        p = gpr.fit_hyperparameters([[0, 0], [1, 1]], [2.0, 2.0])
    assert p.degenerate


def test_too_few_observations():
    with pytest.raises(ValueError):
        gpr.fit_hyperparameters([[0, 0], [1, 0]], [0.0, 1.0])


def test_interpolation_without_nugget():
    X, v = _draw(12, 1.0, 0.5, 2)
    p = gpr.Matern52Params(1.0, 0.5, 0.0)
    cf = gpr.condition(p, X, v, X)
    np.testing.assert_allclose(cf.mean, v, atol=1e-8)
    assert np.all(np.diag(cf.cov) <= 1e-8)


def test_single_observation_closed_form():
    p = gpr.Matern52Params(1.7, 0.4, 0.0)
    x0 = np.array([[0.2, 0.3]])
    T = np.random.default_rng(0).random((5, 2))
    cf = gpr.condition(p, x0, [0.9], T)
    expected = gpr.covariance_matrix(T, x0, p)[:, 0] * 0.9 / 1.7 ** 2
    np.testing.assert_allclose(cf.mean, expected, rtol=1e-12)


def test_no_observations_gives_prior():
    p = gpr.Matern52Params(1.0, 0.3)
    T = np.random.default_rng(1).random((6, 2))
    cf = gpr.condition(p, np.zeros((0, 2)), [], T)
    np.testing.assert_array_equal(cf.mean, 0.0)
    np.testing.assert_allclose(cf.cov, gpr.covariance_matrix(T, T, p))


def test_condition_mean_only():
    p = gpr.Matern52Params(1.0, 0.3, 1e-8)
    X, v = _draw(10, 1.0, 0.3, 4)
    cf = gpr.condition(p, X, v, X[:3], with_cov=False)
    assert cf.cov is None
    assert cf.mean.shape == (3,)


def test_factorization_failure_suggests_nugget():
    p = gpr.Matern52Params(1.0, 0.3, 0.0)
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(np.linalg.LinAlgError, match="nugget"):
        gpr.condition(p, X, [1.0, 1.0, 0.0], X)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(2, 10))
def test_conditional_covariance_properties(seed, n_obs):
    rng = np.random.default_rng(seed)
    p = gpr.Matern52Params(1.2, 0.3, 1e-8 * 1.44)
    X = rng.random((n_obs, 2))
    v = rng.standard_normal(n_obs)
    T = rng.random((25, 2))
    cf = gpr.condition(p, X, v, T)
    prior = gpr.covariance_matrix(T, T, p)
    np.testing.assert_allclose(cf.cov, cf.cov.T, atol=1e-12)
    assert np.all(np.diag(cf.cov) <= np.diag(prior) + 1e-10)
    assert np.linalg.eigvalsh(cf.cov).min() >= -1e-8 * 1.44
    # more data never raises the variance
    sub = gpr.condition(p, X[:-1], v[:-1], T)
    assert np.all(np.diag(cf.cov) <= np.diag(sub.cov) + 1e-10)
    # variance at observation points is at most the nugget
    at_obs = gpr.condition(p, X, v, X)
    assert np.all(np.diag(at_obs.cov) <= p.nugget + 1e-8)
