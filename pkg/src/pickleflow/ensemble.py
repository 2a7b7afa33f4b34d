"""
Monte Carlo statistics of the head field.

Each member draws KL coefficients for ``y`` and a Neumann flux vector, solves
the forward problem and stores the head. Member ``i`` uses its own generator
spawned from ``(seed, i)``, so any member can be regenerated alone and the
statistics do not depend on evaluation order or on the number of workers.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from . import ckle, tpfa

# u_cov.csv grows as N^2; above this size the cache keeps only the anomalies
COV_CSV_MAX_CELLS = 2500


def default_n_ens(n_us):
    return max(2000, 2 * int(n_us))


@dataclass(frozen=True, eq=False)
class EnsembleConfig:
    """Sampling setup for the head ensemble.

    ``q_corr_length`` switches the flux draws from independent faces to an
    exponential correlation ``exp(-d / q_corr_length)`` between Neumann face
    centroids.
    """

    n_ens: int
    seed: int
    q_mean: np.ndarray
    q_std: np.ndarray
    y_basis: ckle.CkleBasis
    q_corr_length: float | None = None

    def __post_init__(self):
        if self.n_ens < 2:
            raise ValueError("n_ens must be at least 2")
        q_mean = np.atleast_1d(np.asarray(self.q_mean, dtype=float))
        q_std = np.broadcast_to(np.asarray(self.q_std, dtype=float), q_mean.shape).copy()
        if np.any(q_std < 0):
            raise ValueError("q_std must be non-negative")
        object.__setattr__(self, "q_mean", q_mean)
        object.__setattr__(self, "q_std", q_std)


def _flux_factor(config, mesh):
    if config.q_corr_length is None or len(config.q_mean) < 2:
        return None
    if mesh is None:
        raise ValueError("correlated fluxes need the mesh for face positions")
    xc = mesh.face_centroids[mesh.neumann_faces]
    d = np.linalg.norm(xc[:, None, :] - xc[None, :, :], axis=-1)
    C = np.exp(-d / config.q_corr_length)
    return linalg.cholesky(C + 1e-12 * np.eye(len(C)), lower=True)


def member_rng(seed, i):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(i),)))


def _draw(config, i, factor):
    rng = member_rng(config.seed, i)
    xi = rng.standard_normal(config.y_basis.n_terms)
    z = rng.standard_normal(len(config.q_mean))
    if factor is not None:
        z = factor @ z
    return ckle.evaluate(config.y_basis, xi), config.q_mean + config.q_std * z


def sample_realization(config, i, mesh=None):
    """Member ``i`` as ``(y, q)``; depends only on ``config.seed`` and ``i``."""
    return _draw(config, i, _flux_factor(config, mesh))


def sample_realizations(config, mesh=None, indices=None):
    """Yield ``(y, q)`` for members ``indices`` (default ``range(n_ens)``)."""
    factor = _flux_factor(config, mesh)
    for i in range(config.n_ens) if indices is None else indices:
        yield _draw(config, i, factor)


@dataclass(frozen=True, eq=False)
class EnsembleStats:
    """Sample mean and covariance of the head.

    The covariance is held in factored form: ``u_cov = anomalies @ anomalies.T``
    with ``anomalies = (U - u_mean) / sqrt(n_ens - 1)``. When loaded from a
    plain covariance file ``anomalies`` is ``None``.
    """

    u_mean: np.ndarray
    anomalies: np.ndarray | None
    n_ens: int
    _cov: np.ndarray | None = field(default=None, repr=False)

    @property
    def mean(self):
        return self.u_mean

    @property
    def u_cov(self):
        if self._cov is None:
            a = self.anomalies
            c = a @ a.T
            object.__setattr__(self, "_cov", 0.5 * (c + c.T))
        return self._cov

    cov = u_cov


def stats_from_members(U):
    """Statistics of member heads stored as columns of ``U`` (N x n_ens)."""
    U = np.asarray(U, dtype=float)
    n = U.shape[1]
    if n < 2:
        raise ValueError("need at least two members")
    # shifted by the first member: exact for identical members, less cancellation
    ref = U[:, :1]
    dev = U - ref
    dmean = dev.mean(axis=1, keepdims=True)
    return EnsembleStats((ref + dmean)[:, 0], (dev - dmean) / np.sqrt(n - 1), n)


def simulate_members(mesh, config, dirichlet_values, workers=1):
    """Forward-solve every member; returns the N x n_ens head matrix."""
    dirichlet_values = np.asarray(dirichlet_values, dtype=float)
    factor = _flux_factor(config, mesh)
    U = np.empty((mesh.n_cells, config.n_ens))

    def run(i):
        y, q = _draw(config, i, factor)
        try:
            U[:, i] = tpfa.solve_head(mesh, y, tpfa.BoundaryData(dirichlet_values, q))
        except Exception as exc:
            raise RuntimeError(f"forward solve failed for ensemble member {i}: {exc}") from exc

    # prime the cached ordering before any concurrent use
    run(0)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, range(1, config.n_ens)))
    else:
        for i in range(1, config.n_ens):
            run(i)
    return U


def _cache_key(mesh, config, dirichlet_values):
    h = hashlib.sha256()
    for a in (mesh.nodes, mesh.cells, mesh.face_markers, config.y_basis.mean,
              config.y_basis.eigenvalues, config.y_basis.modes, config.q_mean, config.q_std,
              np.asarray(dirichlet_values, dtype=float)):
        arr = np.ascontiguousarray(a)
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    h.update(json.dumps([config.n_ens, config.seed, config.q_corr_length]).encode())
    return h.hexdigest()[:24]


def estimate_u_stats(mesh, config, dirichlet_values, cache_dir=None, workers=1):
    """Ensemble mean and covariance of ``u`` for fixed Dirichlet data.

    With ``cache_dir`` the result is stored under a hash of the mesh, the
    ``y`` basis, the sampling configuration and the Dirichlet values, and
    reused on later calls. The cache holds ``u_mean.csv``, the anomaly
    matrix and, for meshes up to ``COV_CSV_MAX_CELLS`` cells, ``u_cov.csv``.
    """
    if cache_dir is not None:
        d = Path(cache_dir) / _cache_key(mesh, config, dirichlet_values)
        if (d / "anomalies.npy").exists():
            mean = np.loadtxt(d / "u_mean.csv", delimiter=",", skiprows=1, ndmin=1)
            return EnsembleStats(mean, np.load(d / "anomalies.npy"), config.n_ens)
    stats = stats_from_members(simulate_members(mesh, config, dirichlet_values, workers))
    if cache_dir is not None:
        d.mkdir(parents=True, exist_ok=True)
        np.savetxt(d / "u_mean.csv", stats.u_mean, delimiter=",", header="value",
                   comments="", fmt="%.17g")
        if mesh.n_cells <= COV_CSV_MAX_CELLS:
            np.savetxt(d / "u_cov.csv", stats.u_cov, delimiter=",", fmt="%.17g")
        np.save(d / "anomalies.npy", stats.anomalies)
    return stats


def load_u_stats(directory, n_ens=0):
    """Read ``u_mean.csv`` and ``u_cov.csv`` written by :func:`estimate_u_stats`."""
    d = Path(directory)
    mean = np.loadtxt(d / "u_mean.csv", delimiter=",", skiprows=1, ndmin=1)
    if (d / "anomalies.npy").exists():
        return EnsembleStats(mean, np.load(d / "anomalies.npy"), n_ens)
    cov = np.loadtxt(d / "u_cov.csv", delimiter=",", ndmin=2)
    return EnsembleStats(mean, None, n_ens, cov)
