"""
Physics-informed inversion in conditional KL coordinates.

Both fields are written as truncated expansions, ``y = ybar + Psi_y xi`` and
``u = ubar + Psi_u eta``, and the coefficients minimise

    0.5 ||l_R(u, y)||^2 + 0.5 beta ||u_s - H_u u||^2 + 0.5 alpha ||R||^2

where ``l_R`` is the TPFA residual on the rows that do not involve the
unknown Neumann flux (all rows when the flux is known) and ``R`` is either
the coefficient vector or the face gradients of both fields. The ``y``
expansion is conditioned on the ``y`` data, so ``y`` observations do not
appear in the objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ckle, lsq, tpfa
from .mesh import ObservationSet, save_cell_field

REGULARIZERS = ("coefficient", "gradient")
DEFAULT_ALPHA = 1e-4
DEFAULT_BETA = 10.0


@dataclass(eq=False)
class PickleProblem:
    """Data, bases and weights of one inversion.

    Parameters
    ----------
    mesh : Mesh
    y_basis, u_basis : CkleBasis
        Expansions of log-transmissivity and head on the mesh cells.
    observations : ObservationSet
        Only the ``u`` part enters the objective.
    dirichlet_values : array
        Head on ``mesh.dirichlet_faces``.
    alpha, beta : float
        Regularization and head-misfit weights.
    regularizer : {"coefficient", "gradient"}
    neumann_fluxes : array, optional
        Known inflow per Neumann face. When given, the residual covers every
        cell; otherwise only the cells away from Neumann faces.
    """

    mesh: object
    y_basis: ckle.CkleBasis
    u_basis: ckle.CkleBasis
    observations: ObservationSet
    dirichlet_values: np.ndarray
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    regularizer: str = "coefficient"
    neumann_fluxes: np.ndarray | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        n = self.mesh.n_cells
        if self.y_basis.n_cells != n or self.u_basis.n_cells != n:
            raise ValueError("bases must be defined on the mesh cells")
        self.dirichlet_values = np.asarray(self.dirichlet_values, dtype=float)
        nq = len(self.mesh.neumann_faces)
        if self.neumann_fluxes is None:
            self._bdata = tpfa.BoundaryData(self.dirichlet_values, np.zeros(nq)).check(self.mesh)
            self.rows = tpfa.restricted_cells(self.mesh)
        else:
            self._bdata = tpfa.BoundaryData(self.dirichlet_values, self.neumann_fluxes).check(self.mesh)
            self.rows = np.arange(n)
        obs = self.observations
        self._psi_u_obs = self.u_basis.scaled_modes[obs.u_cells]
        if self.regularizer == "gradient":
            G = tpfa.gradient_operator(self.mesh)
            self._G = G
            self._g_psi_y = np.asarray(G @ self.y_basis.scaled_modes)
            self._g_psi_u = np.asarray(G @ self.u_basis.scaled_modes)

    @property
    def flux_known(self):
        return self.neumann_fluxes is not None

    @property
    def n_y(self):
        return self.y_basis.n_terms

    @property
    def n_u(self):
        return self.u_basis.n_terms

    def split(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_y + self.n_u,):
            raise ValueError(f"expected {self.n_y + self.n_u} coefficients, got shape {x.shape}")
        return x[: self.n_y], x[self.n_y:]

    def fields(self, xi, eta):
        return ckle.evaluate(self.y_basis, xi), ckle.evaluate(self.u_basis, eta)


def _blocks(problem, xi, eta):
    y, u = problem.fields(xi, eta)
    sys_ = tpfa.assemble(problem.mesh, y, problem._bdata)
    res = (sys_.A @ u - sys_.b)[problem.rows]
    misfit = np.sqrt(problem.beta) * (problem.observations.u_values - u[problem.observations.u_cells])
    if problem.regularizer == "coefficient":
        reg = np.sqrt(problem.alpha) * np.concatenate([xi, eta])
    else:
        G = problem._G
        reg = np.sqrt(problem.alpha) * np.concatenate([G @ y, G @ u])
    return res, misfit, reg, y, u, sys_


def pickle_cost_vector(problem, xi, eta):
    """Stacked residual ``[l_R; sqrt(beta) (u_s - H_u u); sqrt(alpha) R]``."""
    res, misfit, reg, *_ = _blocks(problem, np.asarray(xi, float), np.asarray(eta, float))
    return np.concatenate([res, misfit, reg])


def pickle_objective_terms(problem, xi, eta):
    """The three halves-of-squares that make up the objective, as a dict."""
    res, misfit, reg, *_ = _blocks(problem, np.asarray(xi, float), np.asarray(eta, float))
    return {
        "residual": 0.5 * float(res @ res),
        "misfit": 0.5 * float(misfit @ misfit),
        "regularization": 0.5 * float(reg @ reg),
    }


def pickle_jacobian(problem, xi, eta):
    """Dense Jacobian of :func:`pickle_cost_vector` with respect to ``(xi, eta)``.

    The residual block is ``[(dl/dy)_R Psi_y, A_R Psi_u]``; the misfit block
    is ``[0, -sqrt(beta) Psi_u[u_cells]]``; the regularization block is
    ``sqrt(alpha) I`` or ``sqrt(alpha) diag(G Psi_y, G Psi_u)``.
    """
    y, u = problem.fields(np.asarray(xi, float), np.asarray(eta, float))
    rows = problem.rows
    A = tpfa.stiffness_matrix(problem.mesh, y)
    dl_dy, _ = tpfa.sensitivity_products(problem.mesh, u, y, problem._bdata)
    ny, nu = problem.n_y, problem.n_u
    top = np.hstack([
        np.asarray(dl_dy[rows] @ problem.y_basis.scaled_modes),
        np.asarray(A[rows] @ problem.u_basis.scaled_modes),
    ])
    mid = np.hstack([np.zeros((len(problem._psi_u_obs), ny)), -np.sqrt(problem.beta) * problem._psi_u_obs])
    sa = np.sqrt(problem.alpha)
    if problem.regularizer == "coefficient":
        bottom = sa * np.eye(ny + nu)
    else:
        gy, gu = problem._g_psi_y, problem._g_psi_u
        bottom = np.block([
            [sa * gy, np.zeros((gy.shape[0], nu))],
            [np.zeros((gu.shape[0], ny)), sa * gu],
        ])
    return np.vstack([top, mid, bottom])


@dataclass
class PickleSolution:
    xi_hat: np.ndarray
    eta_hat: np.ndarray
    y_hat: np.ndarray
    u_hat: np.ndarray
    q_hat: np.ndarray | None
    result: lsq.LsqResult
    residual_block: np.ndarray = None

    @property
    def iterations(self):
        return self.result.iterations

    @property
    def wall_time(self):
        return self.result.wall_time


def solve_pickle(problem, options=None, x0=None):
    """Minimise the objective from the conditional means (zero coefficients).

    The Neumann flux is recovered from the estimated fields when it is
    unknown; when it is known it is returned unchanged.
    """
    x0 = np.zeros(problem.n_y + problem.n_u) if x0 is None else np.asarray(x0, dtype=float)
    lp = lsq.LsqProblem(
        residual=lambda x: pickle_cost_vector(problem, *problem.split(x)),
        jacobian=lambda x: pickle_jacobian(problem, *problem.split(x)),
        x0=x0,
    )
    res = lsq.minimize(lp, options)
    xi, eta = problem.split(res.x)
    block, _, _, y_hat, u_hat, _ = _blocks(problem, xi, eta)
    if problem.flux_known:
        q_hat = np.asarray(problem.neumann_fluxes, dtype=float).copy()
    elif len(problem.mesh.neumann_faces):
        q_hat = recover_flux(problem.mesh, u_hat, y_hat, problem.dirichlet_values)
    else:
        q_hat = np.zeros(0)
    return PickleSolution(xi, eta, y_hat, u_hat, q_hat, res, block)


def recover_flux(mesh, u_hat, y_hat, dirichlet_values):
    """Neumann inflow per unit length that zeroes the Neumann-cell residuals.

    A cell with several Neumann faces yields one equation; its total inflow
    is split in proportion to face length, i.e. all of its faces get the
    same flux per unit length.
    """
    faces = mesh.neumann_faces
    if len(faces) == 0:
        raise ValueError("the mesh has no Neumann faces")
    nq = len(faces)
    sys_ = tpfa.assemble(mesh, y_hat, tpfa.BoundaryData(dirichlet_values, np.zeros(nq)))
    inflow = sys_.A @ np.asarray(u_hat, dtype=float) - sys_.b
    owner = mesh.face_cells[faces, 0]
    lengths = mesh.face_lengths[faces]
    per_cell = np.bincount(owner, lengths, mesh.n_cells)
    return inflow[owner] / per_cell[owner]


def transfer_to_new_bc(mesh, y_mean, q_mean, new_dirichlet):
    """Approximate head mean for new Dirichlet data.

    Solves the flow problem with ``T = exp(y_mean)`` and the mean Neumann
    flux; the result replaces a fresh Monte Carlo mean while the ensemble
    covariance is reused.
    """
    return tpfa.solve_head(mesh, y_mean, tpfa.BoundaryData(new_dirichlet, q_mean))


def transferred_u_basis(u_basis, new_mean):
    """``u_basis`` with its mean replaced (modes and eigenvalues shared)."""
    return u_basis.with_mean(new_mean)


def cross_validate_weights(problem, alphas, betas, n_folds=5, seed=0, options=None):
    """K-fold cross-validation of ``(alpha, beta)`` on held-out head data.

    Returns a list of ``(alpha, beta, mean squared held-out head error)``
    sorted by the score.
    """
    obs = problem.observations
    rng = np.random.default_rng(seed)
    order = rng.permutation(obs.n_us)
    folds = np.array_split(order, min(n_folds, obs.n_us))
    out = []
    for a in alphas:
        for b in betas:
            errs = []
            for test in folds:
                train = np.setdiff1d(order, test)
                sub = ObservationSet(obs.y_cells, obs.y_values, obs.u_cells[train], obs.u_values[train])
                p = PickleProblem(problem.mesh, problem.y_basis, problem.u_basis, sub,
                                  problem.dirichlet_values, a, b, problem.regularizer,
                                  problem.neumann_fluxes)
                sol = solve_pickle(p, options)
                errs.append(np.mean((sol.u_hat[obs.u_cells[test]] - obs.u_values[test]) ** 2))
            out.append((a, b, float(np.mean(errs))))
    return sorted(out, key=lambda t: t[2])


def write_solution_bundle(directory, y_hat, u_hat, q_hat, diagnostics):
    """Write ``y_hat.csv``, ``u_hat.csv``, ``q_hat.csv`` and ``diagnostics.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_cell_field(y_hat, d / "y_hat.csv")
    save_cell_field(u_hat, d / "u_hat.csv")
    q = np.zeros(0) if q_hat is None else np.asarray(q_hat, dtype=float)
    with open(d / "q_hat.csv", "w") as fh:
        fh.write("face_index,value\n")
        for k, v in enumerate(q.tolist()):
            fh.write(f"{k},{v!r}\n")
    (d / "diagnostics.json").write_text(json.dumps(diagnostics, indent=2, sort_keys=True))


def diagnostics(solution, reference_y=None, reference_u=None):
    r = solution.result
    out = {"iterations": r.iterations, "status": r.status, "cost": r.cost,
           "time": r.wall_time, "evaluations": r.n_evaluations}
    if reference_y is not None:
        e = np.asarray(solution.y_hat) - reference_y
        out["y_rel_l2"] = float(np.linalg.norm(e) / np.linalg.norm(reference_y))
        out["y_abs_linf"] = float(np.max(np.abs(e)))
    if reference_u is not None:
        e = np.asarray(solution.u_hat) - reference_u
        out["u_rel_l2"] = float(np.linalg.norm(e) / np.linalg.norm(reference_u))
        out["u_abs_linf"] = float(np.max(np.abs(e)))
    return out

