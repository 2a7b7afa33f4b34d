"""
Trust-region nonlinear least squares (Levenberg-Marquardt).

Minimises ``0.5 * ||f(x)||^2`` without bounds. The step solves
``(J^T J + mu D^2) p = -J^T f`` with ``mu`` chosen so that the scaled step
``||D p||`` matches the trust radius, following the classical MINPACK
strategy: the Gauss-Newton step is taken whenever it fits inside the
region, otherwise a safeguarded Newton iteration on the secular equation
finds ``mu``. The radius grows and shrinks with the agreement between
actual and predicted reduction.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy import linalg
from scipy.sparse.linalg import splu

STATUSES = ("converged_ftol", "converged_xtol", "converged_gtol", "max_iter", "timeout")


@dataclass
class LsqProblem:
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], object]
    x0: np.ndarray


@dataclass
class LsqOptions:
    """Stopping rules and trust-region settings.

    ``initial_radius`` defaults to ``100 ||D x0||`` (unbounded when that is
    zero, so the first step is the full Gauss-Newton step). ``max_time`` is
    a wall-clock budget in seconds after which the run stops with status
    ``"timeout"``. ``trace_path`` writes one CSV row per iteration.
    """

    ftol: float = 1e-8
    xtol: float = 1e-8
    gtol: float = 1e-8
    max_iterations: int = 500
    initial_radius: float | None = None
    verbosity: int = 0
    max_time: float | None = None
    trace_path: str | None = None

    def __post_init__(self):
        for name in ("ftol", "xtol", "gtol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")


@dataclass
class LsqResult:
    x: np.ndarray
    cost: float
    iterations: int
    status: str
    cost_trace: list = field(default_factory=list)
    wall_time: float = 0.0
    n_evaluations: int = 0
    gradient_norm: float = 0.0

    @property
    def converged(self):
        return self.status.startswith("converged")


def _gram(J):
    """``J^T J`` and ``J``. Dense-ish rows of a sparse ``J`` go through BLAS."""
    if not sp.issparse(J):
        J = np.asarray(J, dtype=float)
        return J.T @ J
    J = sp.csr_matrix(J)
    m, n = J.shape
    counts = np.diff(J.indptr)
    heavy = counts > max(16, n // 8)
    if not heavy.any():
        H = (J.T @ J).tocsc()
        if H.nnz > 0.1 * n * n:
            return H.toarray()
        return H
    Jd = J[heavy].toarray()
    H = Jd.T @ Jd
    light = ~heavy
    if light.any():
        Js = J[light]
        H += (Js.T @ Js).toarray()
    return H


class _Solver:
    """Factorization of ``H + mu diag(d2)`` for dense or sparse ``H``."""

    def __init__(self, H, d2, mu):
        self.dense = not sp.issparse(H)
        if self.dense:
            M = H.copy()
            M[np.diag_indices_from(M)] += mu * d2
            self._f = linalg.cho_factor(M, lower=True, check_finite=False)
        else:
            M = (H + sp.diags(mu * d2)).tocsc()
            self._f = splu(M, permc_spec="MMD_AT_PLUS_A",
                           diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))

    def solve(self, rhs):
        if self.dense:
            return linalg.cho_solve(self._f, rhs, check_finite=False)
        return self._f.solve(rhs)


def _try_solver(H, d2, mu):
    try:
        s = _Solver(H, d2, mu)
    except (linalg.LinAlgError, RuntimeError):
        return None
    return s


def _lm_step(H, g, d, delta, mu0):
    """Step ``p`` and damping ``mu`` with ``||D p||`` close to ``delta``.

    Returns ``(p, mu)``; ``mu = 0`` means the Gauss-Newton step was used.
    """
    d2 = d * d
    parl = 0.0
    s = _try_solver(H, d2, 0.0)
    if s is not None:
        p = -s.solve(g)
        if np.all(np.isfinite(p)):
            dp = float(np.linalg.norm(d * p))
            phi = dp - delta
            if phi <= 0.1 * delta:
                return p, 0.0
            v = d2 * p
            w2 = float(v @ s.solve(v)) / (dp * dp)
            if w2 > 0:
                parl = phi / (delta * w2)
    gnorm = float(np.linalg.norm(g / d))
    paru = gnorm / delta
    if paru == 0.0:
        paru = np.finfo(float).tiny / min(delta, 0.1)
    mu = max(parl, min(mu0, paru))
    if mu == 0.0:
        mu = gnorm / delta
    p = None
    for it in range(10):
        if mu == 0.0:
            mu = max(np.finfo(float).tiny, 1e-3 * paru)
        s = _try_solver(H, d2, mu)
        if s is None:
            parl = mu
            mu = min(10.0 * mu, paru) if 10.0 * mu < paru else 0.5 * (mu + paru)
            continue
        p = -s.solve(g)
        dp = float(np.linalg.norm(d * p))
        phi = dp - delta
        if abs(phi) <= 0.1 * delta or it == 9:
            break
        v = d2 * p
        w2 = float(v @ s.solve(v)) / (dp * dp)
        parc = phi / (delta * w2) if w2 > 0 else 0.0
        if phi > 0:
            parl = max(parl, mu)
        else:
            paru = min(paru, mu)
        mu = max(parl, mu + parc)
    if p is None:
        # H + mu D^2 never factored: fall back to a scaled steepest-descent step
        p = -(g / d2)
        p *= delta / max(float(np.linalg.norm(d * p)), np.finfo(float).tiny)
    return p, mu


def _as_vector(f, name):
    f = np.asarray(f, dtype=float).ravel()
    if not np.all(np.isfinite(f)):
        raise FloatingPointError(f"non-finite {name}")
    return f


def minimize(problem, options=None):
    """Minimise ``0.5 ||f(x)||^2`` from ``problem.x0``.

    Convergence tests, checked each iteration:

    * gradient: ``||J^T f||_inf <= gtol * max(1, ||f(x0)||)``;
    * cost: actual and predicted relative reductions both below ``ftol``;
    * step: trust radius below ``xtol * ||D x||``.

    Returns
    -------
    LsqResult
        ``iterations`` counts accepted steps; ``cost_trace`` starts with the
        initial cost and has one entry per accepted step.
    """
    opts = options or LsqOptions()
    t0 = time.perf_counter()
    x = np.array(problem.x0, dtype=float).ravel()
    n = len(x)
    f = _as_vector(problem.residual(x), "residual at the initial point")
    n_eval = 1
    fnorm = float(np.linalg.norm(f))
    f0norm = fnorm
    trace = [0.5 * fnorm * fnorm]
    rows = []
    status = None
    iterations = 0
    mu = 0.0
    delta = None
    d = None
    gnorm_inf = 0.0

    def record(step_norm, radius):
        rows.append((iterations, 0.5 * fnorm * fnorm, step_norm, radius))

    record(0.0, float("nan"))
    while status is None:
        if fnorm == 0.0:
            status = "converged_gtol"
            break
        J = problem.jacobian(x)
        if J.shape != (len(f), n):
            raise ValueError(f"Jacobian has shape {J.shape}, expected {(len(f), n)}")
        g = J.T @ f
        g = np.asarray(g, dtype=float).ravel()
        H = _gram(J)
        hdiag = H.diagonal() if sp.issparse(H) else np.diag(H)
        colnorm = np.sqrt(np.maximum(hdiag, 0.0))
        if d is None:
            d = np.where(colnorm > 0, colnorm, 1.0)
            xnorm = float(np.linalg.norm(d * x))
            if opts.initial_radius is not None:
                delta = float(opts.initial_radius)
            else:
                delta = 100.0 * xnorm if xnorm > 0 else np.inf
        else:
            d = np.maximum(d, colnorm)
        gnorm_inf = float(np.max(np.abs(g), initial=0.0))
        if gnorm_inf <= opts.gtol * max(1.0, f0norm):
            status = "converged_gtol"
            break
        if iterations >= opts.max_iterations:
            status = "max_iter"
            break

        # inner loop: shrink the region until a step is accepted
        while True:
            if opts.max_time is not None and time.perf_counter() - t0 > opts.max_time:
                status = "timeout"
                break
            if np.isinf(delta):
                p, mu = _lm_step(H, g, d, np.finfo(float).max, 0.0)
            else:
                p, mu = _lm_step(H, g, d, delta, mu)
            dp = float(np.linalg.norm(d * p))
            x_new = x + p
            f_new = np.asarray(problem.residual(x_new), dtype=float).ravel()
            n_eval += 1
            fnew_norm = float(np.linalg.norm(f_new)) if np.all(np.isfinite(f_new)) else np.inf
            if np.isinf(delta):
                delta = dp
            ared = 1.0 - (fnew_norm / fnorm) ** 2 if 0.1 * fnew_norm < fnorm else -1.0
            jp = np.asarray(J @ p, dtype=float).ravel()
            t1 = float(np.linalg.norm(jp)) / fnorm
            t2 = np.sqrt(mu) * dp / fnorm
            prered = t1 * t1 + 2.0 * t2 * t2
            dirder = -(t1 * t1 + t2 * t2)
            ratio = ared / prered if prered != 0.0 else 0.0

            if ratio <= 0.25:
                temp = 0.5 if ared >= 0 else 0.5 * dirder / (dirder + 0.5 * ared)
                if 0.1 * fnew_norm >= fnorm or temp < 0.1:
                    temp = 0.1
                delta = temp * min(delta, dp / 0.1)
                mu /= temp
            elif mu == 0.0 or ratio >= 0.75:
                delta = dp / 0.5
                mu *= 0.5

            accepted = ratio >= 1e-4
            if accepted:
                x, f, fnorm = x_new, f_new, fnew_norm
                iterations += 1
                trace.append(0.5 * fnorm * fnorm)
                record(dp, delta)
                if opts.verbosity:
                    print(f"iter {iterations:4d}  cost {trace[-1]:.6e}  step {dp:.3e}  radius {delta:.3e}")
            xnorm = float(np.linalg.norm(d * x))
            if abs(ared) <= opts.ftol and prered <= opts.ftol and 0.5 * ratio <= 1.0:
                status = "converged_ftol"
            elif delta <= opts.xtol * xnorm or (xnorm == 0.0 and delta <= opts.xtol):
                status = "converged_xtol"
            elif fnorm == 0.0:
                status = "converged_gtol"
            if accepted or status is not None:
                break
        if status is None and opts.max_time is not None and time.perf_counter() - t0 > opts.max_time:
            status = "timeout"

    if opts.trace_path:
        with open(opts.trace_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "cost", "step_norm", "trust_radius"])
            for r in rows:
                w.writerow([r[0], repr(float(r[1])), repr(float(r[2])), repr(float(r[3]))])
    return LsqResult(
        x=x, cost=0.5 * fnorm * fnorm, iterations=iterations, status=status,
        cost_trace=trace, wall_time=time.perf_counter() - t0, n_evaluations=n_eval,
        gradient_norm=gnorm_inf,
    )


def check_jacobian(residual, jacobian, x, h=1e-6, rng=None, n_probes=None):
    """Largest relative difference between ``J`` and central differences.

    ``h`` is relative to ``max(1, ||x||)``. With ``n_probes`` the check uses
    random directions ``J v`` instead of all columns.
    """
    x = np.asarray(x, dtype=float)
    J = jacobian(x)
    J = J.toarray() if sp.issparse(J) else np.asarray(J, dtype=float)
    step = h * max(1.0, float(np.linalg.norm(x)))
    if n_probes is None:
        dirs = np.eye(len(x))
    else:
        rng = np.random.default_rng(rng)
        dirs = rng.standard_normal((n_probes, len(x)))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    fd = np.column_stack([
        (np.asarray(residual(x + step * v)) - np.asarray(residual(x - step * v))) / (2 * step)
        for v in dirs
    ])
    an = J @ dirs.T
    return float(np.linalg.norm(an - fd) / max(np.linalg.norm(an), np.finfo(float).tiny))
