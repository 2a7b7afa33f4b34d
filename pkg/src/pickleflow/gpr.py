"""
Matérn-5/2 Gaussian process regression (simple Kriging with zero prior mean).

Hyperparameters are fitted by minimising the negative log marginal
likelihood; conditioning returns the posterior mean and full covariance at a
set of target points, which is what the conditional KL bases are built from.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist

SQRT5 = np.sqrt(5.0)
NUGGET_FRACTION = 1e-8


class DegenerateDataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Matern52Params:
    """Kernel ``sigma^2 (1 + a + a^2/3) exp(-a)`` with ``a = sqrt(5) r / ell``.

    ``nugget`` is an absolute variance added to the observation covariance.
    """

    sigma: float
    ell: float
    nugget: float = 0.0
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.ell > 0:
            raise ValueError(f"ell must be positive, got {self.ell}")
        if not self.nugget >= 0:
            raise ValueError(f"nugget must be non-negative, got {self.nugget}")

    def to_json(self):
        return json.dumps({"sigma": self.sigma, "ell": self.ell, "nugget": self.nugget})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(float(d["sigma"]), float(d["ell"]), float(d.get("nugget", 0.0)))


def _matern_unit(r, ell):
    a = SQRT5 * np.asarray(r, dtype=float) / ell
    return (1.0 + a + a * a / 3.0) * np.exp(-a)


def matern52(r, params):
    """Covariance at lag ``r``."""
    return params.sigma ** 2 * _matern_unit(r, params.ell)


def covariance_matrix(xa, xb, params):
    return matern52(cdist(np.atleast_2d(xa), np.atleast_2d(xb)), params)


def negative_log_likelihood(params, coords, values):
    """Negative log marginal likelihood of a zero-mean GP."""
    K = covariance_matrix(coords, coords, params)
    K[np.diag_indices_from(K)] += params.nugget
    L = linalg.cholesky(K, lower=True)
    alpha = linalg.cho_solve((L, True), values)
    n = len(values)
    return 0.5 * values @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * n * np.log(2 * np.pi)


def _nll_and_grad(theta, dist, values, scale):
    """NLL in ``(log(sigma/scale), log ell)`` with nugget ``1e-8 sigma^2``."""
    s = np.exp(theta[0]) * scale
    ell = np.exp(theta[1])
    a = SQRT5 * dist / ell
    ea = np.exp(-a)
    R = (1.0 + a + a * a / 3.0) * ea
    R[np.diag_indices_from(R)] += NUGGET_FRACTION
    dR = (a * a / 3.0) * (1.0 + a) * ea  # dR / dlog(ell)
    try:
        L = linalg.cholesky(s * s * R, lower=True)
    except linalg.LinAlgError:
        return np.inf, np.zeros(2)
    alpha = linalg.cho_solve((L, True), values)
    n = len(values)
    nll = 0.5 * values @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * n * np.log(2 * np.pi)
    Kinv = linalg.cho_solve((L, True), np.eye(n))
    W = Kinv - np.outer(alpha, alpha)
    g_s = np.sum(W * (2.0 * s * s * R)) * 0.5
    g_l = np.sum(W * (s * s * dR)) * 0.5
    return nll, np.array([g_s, g_l])


def fit_hyperparameters(obs_coords, obs_values, n_grid=8, ell_bounds=None):
    """Maximum-likelihood ``(sigma, ell)`` for a zero-mean Matérn-5/2 GP.

    An ``n_grid`` x ``n_grid`` logarithmic grid of starting points is scored
    and the best one refined with L-BFGS-B. ``sigma`` is searched relative to
    the root-mean-square of the data, so scaling the data by ``c`` scales the
    fitted ``sigma`` by ``c`` and leaves ``ell`` unchanged.

    Returns
    -------
    Matern52Params
        With ``nugget = 1e-8 sigma^2``. If all values are identical the
        result has ``degenerate=True`` and a :class:`DegenerateDataWarning`
        is issued.
    """
    X = np.atleast_2d(np.asarray(obs_coords, dtype=float))
    v = np.asarray(obs_values, dtype=float).ravel()
    if len(X) != len(v):
        raise ValueError("coordinates and values differ in length")
    dist = cdist(X, X)
    off = dist[np.triu_indices(len(v), 1)]
    if len(v) >= 2 and np.ptp(v) == 0.0:
        warnings.warn("all observed values are identical; sigma set to its lower bound",
                      DegenerateDataWarning, stacklevel=2)
        scale = max(abs(v[0]), 1.0)
        ell = float(np.median(off[off > 0])) if np.any(off > 0) else 1.0
        sigma = 1e-6 * scale
        return Matern52Params(sigma, ell, NUGGET_FRACTION * sigma ** 2, degenerate=True)
    if len(v) < 3:
        raise ValueError("at least 3 observations are needed to fit hyperparameters")
    if not np.any(off > 0):
        raise ValueError("all observations are collocated")
    scale = float(np.sqrt(np.mean(v * v)))
    dmin = float(off[off > 0].min())
    dmax = float(off.max())
    if ell_bounds is None:
        ell_bounds = (0.25 * dmin, 10.0 * dmax)
    s_bounds = (np.log(1e-3), np.log(1e3))
    l_bounds = (np.log(ell_bounds[0]), np.log(ell_bounds[1]))

    s_grid = np.linspace(np.log(0.2), np.log(5.0), n_grid)
    l_grid = np.linspace(np.log(max(dmin, ell_bounds[0])), np.log(min(dmax, ell_bounds[1])), n_grid)
    best, best_theta = np.inf, None
    for ts in s_grid:
        for tl in l_grid:
            val, _ = _nll_and_grad(np.array([ts, tl]), dist, v, scale)
            if val < best:
                best, best_theta = val, np.array([ts, tl])
    res = optimize.minimize(
        _nll_and_grad, best_theta, args=(dist, v, scale), jac=True,
        method="L-BFGS-B", bounds=[s_bounds, l_bounds],
    )
    theta = res.x if res.fun <= best else best_theta
    sigma = float(np.exp(theta[0]) * scale)
    ell = float(np.exp(theta[1]))
    return Matern52Params(sigma, ell, NUGGET_FRACTION * sigma ** 2)


@dataclass(frozen=True)
class ConditionedField:
    """Posterior mean and covariance at the target points."""

    mean: np.ndarray
    cov: np.ndarray


def condition(params, obs_coords, obs_values, target_coords, with_cov=True):
    """Kriging mean and covariance at ``target_coords`` given observations.

    The covariance is symmetrised and its negative diagonal entries (round-off)
    are clipped to zero. With ``with_cov=False`` only the mean is computed
    and ``cov`` is ``None``.
    """
    Xt = np.atleast_2d(np.asarray(target_coords, dtype=float))
    v = np.asarray(obs_values, dtype=float).ravel()
    if len(v) == 0:
        mean = np.zeros(len(Xt))
        cov = covariance_matrix(Xt, Xt, params) if with_cov else None
        return ConditionedField(mean, cov)
    Xo = np.atleast_2d(np.asarray(obs_coords, dtype=float))
    Cs = covariance_matrix(Xo, Xo, params)
    Cs[np.diag_indices_from(Cs)] += params.nugget
    try:
        L = linalg.cholesky(Cs, lower=True)
    except linalg.LinAlgError:
        raise linalg.LinAlgError(
            "observation covariance is not positive definite; increase the nugget "
            f"(currently {params.nugget:.3g})"
        ) from None
    Cx = covariance_matrix(Xt, Xo, params)
    mean = Cx @ linalg.cho_solve((L, True), v)
    if not with_cov:
        return ConditionedField(mean, None)
    V = linalg.solve_triangular(L, Cx.T, lower=True)
    cov = covariance_matrix(Xt, Xt, params)
    cov -= V.T @ V
    cov = 0.5 * (cov + cov.T)
    d = np.diag_indices_from(cov)
    cov[d] = np.maximum(cov[d], 0.0)
    return ConditionedField(mean, cov)
