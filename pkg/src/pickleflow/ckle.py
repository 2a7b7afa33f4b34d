"""
Truncated (conditional) Karhunen-Loève bases on the cell centres.

A basis represents a field as ``mean + sum_i phi_i sqrt(lambda_i) c_i``. The
eigenpairs come from the plain symmetric eigendecomposition of the discrete
covariance matrix, or, for Monte Carlo statistics, from the thin SVD of the
anomaly matrix (same eigenpairs, without forming the N x N covariance).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg


@dataclass(frozen=True, eq=False)
class CkleBasis:
    """Mean vector plus truncated eigenpairs, eigenvalues in descending order."""

    mean: np.ndarray
    eigenvalues: np.ndarray
    modes: np.ndarray
    rtol_achieved: float = 0.0

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        modes = np.asarray(self.modes, dtype=float)
        shape = (len(self.mean), len(lam))
        if modes.shape != shape:
            modes = modes.reshape(shape)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "scaled_modes", modes * np.sqrt(lam))

    def with_mean(self, mean):
        """Same eigenpairs (shared, not copied) around a new mean."""
        mean = np.asarray(mean, dtype=float)
        if mean.shape != self.mean.shape:
            raise ValueError(f"mean must have shape {self.mean.shape}")
        new = object.__new__(CkleBasis)
        for name, value in vars(self).items():
            object.__setattr__(new, name, value)
        object.__setattr__(new, "mean", mean)
        return new

    @property
    def n_terms(self):
        return len(self.eigenvalues)

    @property
    def n_cells(self):
        return len(self.mean)

    def truncate(self, n_terms):
        """Leading ``n_terms`` modes of this basis."""
        if n_terms > self.n_terms:
            raise ValueError(f"basis has only {self.n_terms} modes")
        lam = self.eigenvalues
        kept = lam[:n_terms]
        total = lam.sum() if self.rtol_achieved == 0.0 else lam.sum() / (1.0 - self.rtol_achieved)
        rtol = float((total - kept.sum()) / total) if total > 0 else 0.0
        return CkleBasis(self.mean, kept, self.modes[:, :n_terms], max(rtol, 0.0))


def _fix_signs(modes):
    idx = np.argmax(np.abs(modes), axis=0)
    s = np.sign(modes[idx, np.arange(modes.shape[1])])
    s[s == 0] = 1.0
    return modes * s


def truncation_count(eigenvalues, rtol):
    """Smallest ``k`` with ``sum(lambda[k:]) <= rtol * sum(lambda)``."""
    lam = np.asarray(eigenvalues, dtype=float)
    total = lam.sum()
    if total <= 0.0:
        return 0
    # tail[k] = sum(lam[k:]), accumulated from the smallest eigenvalue up
    tail = np.concatenate([np.cumsum(lam[::-1])[::-1], [0.0]])
    return int(np.flatnonzero(tail <= rtol * total)[0])


def _eigenpairs(field, n_wanted=None):
    """Descending eigenpairs and the total variance (sum of all eigenvalues)."""
    anomalies = getattr(field, "anomalies", None)
    if anomalies is not None:
        U, s, _ = linalg.svd(anomalies, full_matrices=False, lapack_driver="gesdd")
        lam = s * s
        return lam, U, float(lam.sum())
    cov = np.asarray(field.cov, dtype=float)
    n = len(cov)
    if n_wanted is not None and n_wanted < n // 2:
        lam, V = linalg.eigh(cov, subset_by_index=[n - n_wanted, n - 1])
        total = float(np.trace(cov))
    else:
        lam, V = linalg.eigh(cov)
        total = None
    lam = np.maximum(lam[::-1], 0.0)
    V = V[:, ::-1]
    if total is None:
        total = float(lam.sum())
    return lam, V, total


def build_basis(field, rtol=None, n_terms=None, max_terms=None):
    """Truncated eigenbasis of a conditioned field or ensemble.

    Parameters
    ----------
    field
        Object with ``mean`` and either a dense ``cov`` matrix
        (:class:`~pickleflow.gpr.ConditionedField`) or an ``anomalies``
        matrix with ``cov = anomalies @ anomalies.T``
        (:class:`~pickleflow.ensemble.EnsembleStats`).
    rtol : float, optional
        Keep the fewest modes whose discarded eigenvalue sum is at most
        ``rtol`` times the total.
    n_terms : int, optional
        Keep exactly this many modes. Exactly one of ``rtol`` and
        ``n_terms`` must be given.
    max_terms : int, optional
        Upper cap applied after the ``rtol`` rule.

    Each mode is signed so that its largest-magnitude entry is positive.
    """
    if (rtol is None) == (n_terms is None):
        raise ValueError("give exactly one of rtol and n_terms")
    mean = np.asarray(field.mean, dtype=float)
    n = len(mean)
    if n_terms is not None:
        if n_terms > n:
            raise ValueError(f"requested {n_terms} modes but the field has only {n} cells")
        if n_terms < 0:
            raise ValueError("n_terms must be non-negative")
    lam, V, total = _eigenpairs(field, n_terms)
    if n_terms is None:
        k = truncation_count(np.concatenate([lam, [max(total - lam.sum(), 0.0)]]), rtol)
        k = min(k, len(lam))
        if max_terms is not None:
            k = min(k, max_terms)
    else:
        k = n_terms
        if k > len(lam):
            # ensemble rank below the request: pad with zero-variance directions
            extra = linalg.null_space(V.T)[:, : k - len(lam)] if len(lam) else np.eye(n)[:, :k]
            V = np.hstack([V, extra])
            lam = np.concatenate([lam, np.zeros(k - len(lam))])
    modes = _fix_signs(V[:, :k])
    kept = lam[:k]
    achieved = float(max(total - kept.sum(), 0.0) / total) if total > 0 else 0.0
    return CkleBasis(mean.copy(), kept.copy(), modes, achieved)


def evaluate(basis, coeffs):
    """``mean + scaled_modes @ coeffs``."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (basis.n_terms,):
        raise ValueError(f"expected {basis.n_terms} coefficients, got shape {coeffs.shape}")
    return basis.mean + basis.scaled_modes @ coeffs


def project(basis, field):
    """Coefficients of the orthogonal projection of ``field - mean`` onto the modes."""
    lam = basis.eigenvalues
    if np.any(lam <= 0.0):
        raise ValueError("cannot project onto a basis with zero eigenvalues")
    return basis.modes.T @ (np.asarray(field, dtype=float) - basis.mean) / np.sqrt(lam)


def save_basis(basis, directory):
    """Write ``mean.csv``, ``eigenvalues.csv`` and ``modes.csv``.

    ``modes.csv`` has one row per cell and one column per mode, in the same
    order as ``eigenvalues.csv``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.savetxt(d / "mean.csv", basis.mean, delimiter=",", header="value", comments="", fmt="%.17g")
    np.savetxt(d / "eigenvalues.csv", basis.eigenvalues, delimiter=",", header="eigenvalue",
               comments="", fmt="%.17g")
    header = ",".join(f"mode_{i}" for i in range(basis.n_terms))
    np.savetxt(d / "modes.csv", basis.modes.reshape(basis.n_cells, -1), delimiter=",",
               header=header, comments="", fmt="%.17g")
    (d / "rtol.txt").write_text(repr(float(basis.rtol_achieved)))


def load_basis(directory):
    d = Path(directory)
    mean = np.loadtxt(d / "mean.csv", delimiter=",", skiprows=1, ndmin=1)
    lam = np.loadtxt(d / "eigenvalues.csv", delimiter=",", skiprows=1, ndmin=1)
    if lam.size:
        modes = np.loadtxt(d / "modes.csv", delimiter=",", skiprows=1, ndmin=2)
    else:
        modes = np.zeros((len(mean), 0))
    rtol = float((d / "rtol.txt").read_text()) if (d / "rtol.txt").exists() else 0.0
    return CkleBasis(mean, lam, modes.reshape(len(mean), len(lam)), rtol)
