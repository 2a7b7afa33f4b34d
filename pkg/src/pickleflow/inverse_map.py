"""
Baseline maximum a posteriori estimate with per-cell unknowns.

The unknowns are ``p = (y, q)`` (one ``y`` per cell, one flux per Neumann
face), or just ``y`` when the flux is known. The PDE is eliminated by a
forward solve, leaving the least-squares cost vector

    [u_s - H_u u(p);  y_s - H_y y;  sqrt(gamma) G y;  sqrt(gamma) q].

Observed head sensitivities come from the adjoint: with ``W = A^-T H_u^T``
(one multi-right-hand-side solve against the cached factorization) the
misfit rows of the Jacobian are ``W^T [dl/dy, dl/dq]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import lsq, tpfa
from .mesh import ObservationSet

DEFAULT_GAMMA = 1e-4


@dataclass(eq=False)
class MapProblem:
    """Observations, boundary data and regularization weight.

    ``neumann_fluxes`` is required when ``flux_known`` and otherwise ignored.
    """

    mesh: object
    observations: ObservationSet
    dirichlet_values: np.ndarray
    gamma: float = DEFAULT_GAMMA
    flux_known: bool = False
    neumann_fluxes: np.ndarray | None = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        self.dirichlet_values = np.asarray(self.dirichlet_values, dtype=float)
        nq = len(self.mesh.neumann_faces)
        if self.flux_known:
            if self.neumann_fluxes is None:
                raise ValueError("flux_known requires neumann_fluxes")
            self.neumann_fluxes = np.asarray(self.neumann_fluxes, dtype=float)
        tpfa.BoundaryData(self.dirichlet_values, np.zeros(nq)).check(self.mesh)
        self.n_q = 0 if self.flux_known else nq
        n = self.mesh.n_cells
        obs = self.observations
        self._G = tpfa.gradient_operator(self.mesh)
        ny = obs.n_ys
        self._Hy = sp.csr_matrix((np.ones(ny), (np.arange(ny), obs.y_cells)), shape=(ny, n))
        # constant lower blocks of the Jacobian
        sg = np.sqrt(self.gamma)
        blocks = [[-self._Hy, None], [sg * self._G, None]]
        if self.n_q:
            blocks[0][1] = sp.csr_matrix((ny, self.n_q))
            blocks[1][1] = sp.csr_matrix((self._G.shape[0], self.n_q))
            blocks.append([sp.csr_matrix((self.n_q, n)), sg * sp.identity(self.n_q, format="csr")])
        else:
            blocks = [[b[0]] for b in blocks]
        self._lower = sp.bmat(blocks, format="csr")
        self._hu = np.zeros((n, obs.n_us))
        self._hu[obs.u_cells, np.arange(obs.n_us)] = 1.0
        self._last = None

    @property
    def n_params(self):
        return self.mesh.n_cells + self.n_q

    def split(self, p):
        p = np.asarray(p, dtype=float)
        if p.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {p.shape}")
        n = self.mesh.n_cells
        q = self.neumann_fluxes if self.flux_known else p[n:]
        return p[:n], q

    def state(self, p):
        """Forward solution at ``p``, cached for the most recent ``p``."""
        p = np.asarray(p, dtype=float)
        if self._last is not None and np.array_equal(self._last[0], p):
            return self._last[1]
        y, q = self.split(p)
        sys_ = tpfa.assemble(self.mesh, y, tpfa.BoundaryData(self.dirichlet_values, q))
        fac = tpfa.factorize(sys_)
        u = tpfa.forward_solve(sys_, fac)
        st = (y, q, u, fac)
        self._last = (p.copy(), st)
        return st


def map_cost_vector(problem, p):
    y, q, u, _ = problem.state(p)
    obs = problem.observations
    sg = np.sqrt(problem.gamma)
    parts = [obs.u_values - u[obs.u_cells], obs.y_values - y[obs.y_cells], sg * (problem._G @ y)]
    if problem.n_q:
        parts.append(sg * q)
    return np.concatenate(parts)


def map_objective_terms(problem, p):
    y, q, u, _ = problem.state(p)
    obs = problem.observations
    du = obs.u_values - u[obs.u_cells]
    dy = obs.y_values - y[obs.y_cells]
    gy = problem._G @ y
    return {
        "u_misfit": 0.5 * float(du @ du),
        "y_misfit": 0.5 * float(dy @ dy),
        "gradient": 0.5 * problem.gamma * float(gy @ gy),
        "flux": 0.5 * problem.gamma * float(q @ q) if problem.n_q else 0.0,
    }


def map_jacobian(problem, p):
    """Sparse Jacobian; the ``N_us`` misfit rows are dense, the rest constant."""
    y, q, u, fac = problem.state(p)
    bdata = tpfa.BoundaryData(problem.dirichlet_values, q)
    dl_dy, dl_dq = tpfa.sensitivity_products(problem.mesh, u, y, bdata)
    W = fac.solve(problem._hu, trans=True)
    top = [np.asarray((dl_dy.T @ W).T)]
    if problem.n_q:
        top.append(np.asarray((dl_dq.T @ W).T))
    top = sp.csr_matrix(np.hstack(top))
    return sp.vstack([top, problem._lower], format="csr")


@dataclass
class MapSolution:
    y_hat: np.ndarray
    q_hat: np.ndarray
    u_hat: np.ndarray
    result: lsq.LsqResult

    @property
    def iterations(self):
        return self.result.iterations

    @property
    def wall_time(self):
        return self.result.wall_time


def solve_map(problem, y_init, q_init=None, options=None):
    """Minimise from ``y_init`` (typically the kriging mean) and ``q_init``.

    ``u_hat`` comes from a final forward solve at the returned parameters.
    """
    y_init = np.asarray(y_init, dtype=float)
    if problem.n_q:
        q_init = np.zeros(problem.n_q) if q_init is None else np.asarray(q_init, dtype=float)
        p0 = np.concatenate([y_init, q_init])
    else:
        p0 = y_init.copy()
    lp = lsq.LsqProblem(
        residual=lambda p: map_cost_vector(problem, p),
        jacobian=lambda p: map_jacobian(problem, p),
        x0=p0,
    )
    res = lsq.minimize(lp, options)
    y, q, u, _ = problem.state(res.x)
    return MapSolution(y.copy(), np.asarray(q, dtype=float).copy(), u.copy(), res)
