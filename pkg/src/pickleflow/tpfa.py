"""
Two-point flux approximation (TPFA) for steady Darcy flow on a :class:`Mesh`.

The unknowns are cell-centred heads ``u``; the coefficient field is the
log-transmissivity ``y`` (``T = exp(y)``). The discrete mass balance of each
cell is

    l(u, y, q) = A(y) u - b(y, q) = 0,

with ``A`` symmetric and ``b`` carrying the Dirichlet heads and the Neumann
fluxes ``q``. Fluxes are inflow per unit face length: a Neumann face with
value ``q_k`` injects ``q_k * |e_k|`` into its cell.

Geometry (half-transmissibility factors, sparsity pattern, fill-reducing
ordering) is computed once per mesh and cached.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import DIRICHLET, NEUMANN


class SingularSystemError(RuntimeError):
    """The discrete system has no Dirichlet faces (pure Neumann problem)."""


class GeometryError(ValueError):
    """A half-transmissibility is non-positive."""


@dataclass(frozen=True)
class BoundaryData:
    """Boundary values aligned with ``mesh.dirichlet_faces`` / ``mesh.neumann_faces``.

    ``neumann_fluxes`` are inflows per unit length. NoFlow faces carry no data.
    """

    dirichlet_values: np.ndarray
    neumann_fluxes: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.dirichlet_values, dtype=float).ravel()
        q = np.asarray(self.neumann_fluxes, dtype=float).ravel()
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(q))):
            raise ValueError("boundary values must be finite")
        object.__setattr__(self, "dirichlet_values", d)
        object.__setattr__(self, "neumann_fluxes", q)

    def check(self, mesh):
        if len(self.dirichlet_values) != len(mesh.dirichlet_faces):
            raise ValueError(
                f"expected {len(mesh.dirichlet_faces)} Dirichlet values, "
                f"got {len(self.dirichlet_values)}"
            )
        if len(self.neumann_fluxes) != len(mesh.neumann_faces):
            raise ValueError(
                f"expected {len(mesh.neumann_faces)} Neumann fluxes, "
                f"got {len(self.neumann_fluxes)}"
            )
        return self

    @classmethod
    def from_functions(cls, mesh, head=0.0, flux=0.0):
        """Evaluate ``head(x, y)`` and ``flux(x, y)`` (or constants) at face centroids."""
        def ev(fn, faces):
            xc = mesh.face_centroids[faces]
            if callable(fn):
                return np.asarray(fn(xc[:, 0], xc[:, 1]), dtype=float) * np.ones(len(faces))
            return np.full(len(faces), float(fn))

        return cls(ev(head, mesh.dirichlet_faces), ev(flux, mesh.neumann_faces))

    def with_dirichlet(self, values):
        return BoundaryData(values, self.neumann_fluxes)

    def with_fluxes(self, values):
        return BoundaryData(self.dirichlet_values, values)


class _Geometry:
    """Per-mesh constants for assembly."""

    def __init__(self, mesh):
        n = mesh.n_cells
        fc = mesh.face_cells
        self.n = n
        self.interior = mesh.interior_faces
        self.i = fc[self.interior, 0]
        self.j = fc[self.interior, 1]
        self.g_i = self._factor(mesh, self.i, self.interior, sign=1.0)
        self.g_j = self._factor(mesh, self.j, self.interior, sign=-1.0)

        self.dfaces = mesh.dirichlet_faces
        self.dcell = fc[self.dfaces, 0]
        self.g_d = self._factor(mesh, self.dcell, self.dfaces, sign=1.0)

        self.nfaces = mesh.neumann_faces
        self.ncell = fc[self.nfaces, 0]
        self.nlen = mesh.face_lengths[self.nfaces]

        neumann_cells = np.unique(self.ncell)
        dirichlet_cells = np.setdiff1d(np.unique(self.dcell), neumann_cells)
        interior_cells = np.setdiff1d(np.arange(n), np.union1d(neumann_cells, dirichlet_cells))
        self.I, self.D, self.N = interior_cells, dirichlet_cells, neumann_cells
        self.ID = np.union1d(interior_cells, dirichlet_cells)

        # fixed CSR pattern: diagonal + one entry per interior face, both sides
        rows = np.concatenate([np.arange(n), self.i, self.j])
        cols = np.concatenate([np.arange(n), self.j, self.i])
        pattern = sp.csr_matrix((np.arange(1, len(rows) + 1, dtype=float), (rows, cols)), shape=(n, n))
        pattern.sort_indices()
        slot = np.empty(len(rows), dtype=np.int64)
        slot[pattern.data.astype(np.int64) - 1] = np.arange(len(rows))
        self.indptr = pattern.indptr
        self.indices = pattern.indices
        self.slot_diag = slot[:n]
        self.slot_ij = slot[n:n + len(self.i)]
        self.slot_ji = slot[n + len(self.i):]
        self.nnz = len(rows)
        self.ordering = None

        centroid_dist = np.linalg.norm(
            mesh.cell_centroids[self.j] - mesh.cell_centroids[self.i], axis=1
        )
        self.centroid_dist = centroid_dist

    @staticmethod
    def _factor(mesh, cells, faces, sign):
        c = mesh.face_centroids[faces] - mesh.cell_centroids[cells]
        nrm = sign * mesh.face_normals[faces]
        g = mesh.face_lengths[faces] * np.sum(c * nrm, axis=1) / np.sum(c * c, axis=1)
        bad = np.flatnonzero(~(g > 0.0))
        if bad.size:
            k = bad[0]
            raise GeometryError(
                f"non-positive half-transmissibility for cell {cells[k]} and face {faces[k]}"
            )
        return g

    def matrix(self, diag, offdiag):
        data = np.empty(self.nnz)
        data[self.slot_diag] = diag
        data[self.slot_ij] = offdiag
        data[self.slot_ji] = offdiag
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


_GEOMETRY = weakref.WeakKeyDictionary()


def _geometry(mesh):
    geo = _GEOMETRY.get(mesh)
    if geo is None:
        geo = _Geometry(mesh)
        _GEOMETRY[mesh] = geo
    return geo


def cell_sets(mesh):
    """Cell classification ``(I, D, N)``.

    ``N`` holds cells adjacent to a Neumann face, ``D`` the remaining cells
    adjacent to a Dirichlet face and ``I`` everything else. A corner cell
    touching both boundary types belongs to ``N`` because its balance
    involves the flux.
    """
    geo = _geometry(mesh)
    return geo.I, geo.D, geo.N


def restricted_cells(mesh):
    """Sorted indices of ``I`` union ``D``."""
    return _geometry(mesh).ID


def half_transmissibility(mesh, cell, face, T):
    """``T * |e| * (c . n) / |c|^2`` for ``cell`` and one of its faces.

    ``c`` runs from the cell centroid to the face midpoint and ``n`` is the
    unit normal pointing out of ``cell``.
    """
    if not T > 0:
        raise ValueError("transmissivity must be positive")
    a, b = mesh.face_cells[face]
    if cell == a:
        sign = 1.0
    elif cell == b:
        sign = -1.0
    else:
        raise ValueError(f"face {face} is not a face of cell {cell}")
    g = _Geometry._factor(mesh, np.array([cell]), np.array([face]), sign)[0]
    return T * g


@dataclass(frozen=True)
class DiscreteSystem:
    """Assembled TPFA system ``A u = b`` with the cell classification."""

    A: sp.csr_matrix
    b: np.ndarray
    interior_cells: np.ndarray
    dirichlet_cells: np.ndarray
    neumann_cells: np.ndarray
    n_dirichlet_faces: int
    mesh: object = None


def _coefficients(geo, y):
    T = np.exp(y)
    tau_i = T[geo.i] * geo.g_i
    tau_j = T[geo.j] * geo.g_j
    t_face = tau_i * tau_j / (tau_i + tau_j)
    tau_d = T[geo.dcell] * geo.g_d
    return T, tau_i, tau_j, t_face, tau_d


def _stiffness(geo, t_face, tau_d):
    diag = np.zeros(geo.n)
    diag += np.bincount(geo.i, t_face, geo.n) + np.bincount(geo.j, t_face, geo.n)
    diag += np.bincount(geo.dcell, tau_d, geo.n)
    return geo.matrix(diag, -t_face)


def _rhs_dirichlet(geo, tau_d, dirichlet_values):
    return np.bincount(geo.dcell, tau_d * dirichlet_values, geo.n)


def _rhs_neumann(geo, fluxes):
    return np.bincount(geo.ncell, fluxes * geo.nlen, geo.n)


def _check_y(mesh, y):
    y = np.asarray(y, dtype=float)
    if y.shape != (mesh.n_cells,):
        raise ValueError(f"field must have length {mesh.n_cells}, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("field contains non-finite values")
    return y


def stiffness_matrix(mesh, y):
    geo = _geometry(mesh)
    _, _, _, t_face, tau_d = _coefficients(geo, _check_y(mesh, y))
    return _stiffness(geo, t_face, tau_d)


def assemble(mesh, y, bdata):
    """Assemble ``A(y)`` and ``b(y, q)``."""
    geo = _geometry(mesh)
    y = _check_y(mesh, y)
    bdata.check(mesh)
    _, _, _, t_face, tau_d = _coefficients(geo, y)
    A = _stiffness(geo, t_face, tau_d)
    b = _rhs_dirichlet(geo, tau_d, bdata.dirichlet_values) + _rhs_neumann(geo, bdata.neumann_fluxes)
    return DiscreteSystem(A, b, geo.I, geo.D, geo.N, len(geo.dfaces), mesh)


class Factorization:
    """Sparse LU of a TPFA matrix reusing a per-mesh fill-reducing ordering.

    The first factorization on a mesh computes a minimum-degree ordering;
    later ones apply it symmetrically and skip the ordering phase.
    """

    def __init__(self, A, mesh=None):
        A = sp.csc_matrix(A)
        opts = dict(diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
        geo = _geometry(mesh) if mesh is not None else None
        if geo is not None and geo.ordering is not None:
            perm = geo.ordering
            self._lu = splu(A[perm][:, perm].tocsc(), permc_spec="NATURAL", **opts)
        else:
            lu = splu(A, permc_spec="MMD_AT_PLUS_A", **opts)
            if geo is None:
                self._lu, perm = lu, None
            else:
                # perm_c maps original to permuted positions; indexing needs the inverse
                perm = np.argsort(lu.perm_c)
                geo.ordering = perm
                self._lu = splu(A[perm][:, perm].tocsc(), permc_spec="NATURAL", **opts)
        self._perm = perm
        self.shape = A.shape

    def solve(self, rhs, trans=False):
        rhs = np.asarray(rhs, dtype=float)
        t = "T" if trans else "N"
        if self._perm is None:
            return self._lu.solve(rhs, trans=t)
        out = np.empty_like(rhs)
        out[self._perm] = self._lu.solve(rhs[self._perm], trans=t)
        return out


def factorize(sys_or_A, mesh=None):
    if isinstance(sys_or_A, DiscreteSystem):
        if sys_or_A.n_dirichlet_faces == 0:
            raise SingularSystemError("no Dirichlet faces: the TPFA system is singular")
        return Factorization(sys_or_A.A, sys_or_A.mesh)
    return Factorization(sys_or_A, mesh)


def forward_solve(system, factor=None):
    """Solve ``A u = b``.

    Parameters
    ----------
    system : DiscreteSystem
    factor : Factorization, optional
        Reuse an existing factorization of ``system.A``.
    """
    if system.n_dirichlet_faces == 0:
        raise SingularSystemError("no Dirichlet faces: the TPFA system is singular")
    if factor is None:
        factor = factorize(system)
    u = factor.solve(system.b)
    res = np.max(np.abs(system.A @ u - system.b)) if len(u) else 0.0
    tol = 1e-10 * max(1.0, float(np.max(np.abs(system.b), initial=0.0)))
    if not res <= tol:
        # one step of iterative refinement
        u = u + factor.solve(system.b - system.A @ u)
    return u


def solve_head(mesh, y, bdata):
    """Convenience: assemble and solve, returning the head field."""
    return forward_solve(assemble(mesh, y, bdata))


def residual(mesh, u, y, bdata):
    """Cell mass-balance residual ``A(y) u - b(y, q)``."""
    sys_ = assemble(mesh, y, bdata)
    return sys_.A @ np.asarray(u, dtype=float) - sys_.b


def residual_restricted(mesh, u, y, dirichlet_values):
    """Residual rows of the ``I`` and ``D`` cells, which do not involve the fluxes."""
    geo = _geometry(mesh)
    y = _check_y(mesh, y)
    dirichlet_values = np.asarray(dirichlet_values, dtype=float)
    if len(dirichlet_values) != len(geo.dfaces):
        raise ValueError(f"expected {len(geo.dfaces)} Dirichlet values")
    _, _, _, t_face, tau_d = _coefficients(geo, y)
    A = _stiffness(geo, t_face, tau_d)
    full = A @ np.asarray(u, dtype=float) - _rhs_dirichlet(geo, tau_d, dirichlet_values)
    return full[geo.ID]


def gradient_operator(mesh):
    """Two-point directional derivative across each interior face.

    Row ``k`` (interior face between cells ``i`` and ``j``) evaluates
    ``(v_j - v_i) / |p_j - p_i|``.
    """
    geo = _geometry(mesh)
    m = len(geo.i)
    inv = 1.0 / geo.centroid_dist
    rows = np.concatenate([np.arange(m), np.arange(m)])
    cols = np.concatenate([geo.j, geo.i])
    vals = np.concatenate([inv, -inv])
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, mesh.n_cells))


def sensitivity_products(mesh, u, y, bdata=None):
    """Partial derivatives of the residual at fixed ``u``.

    Returns
    -------
    dl_dy : csr_matrix, shape (N, N)
        Column ``m`` is ``(dA/dy_m) u - db/dy_m``.
    dl_dq : csr_matrix, shape (N, N_q)
        Column ``k`` is ``-db/dq_k``: ``-|e_k|`` in the cell owning face ``k``.
    """
    geo = _geometry(mesh)
    y = _check_y(mesh, y)
    u = np.asarray(u, dtype=float)
    _, tau_i, tau_j, t_face, tau_d = _coefficients(geo, y)
    # d T_f / d y_i = T_f^2 / tau_i, since d tau_i / d y_i = tau_i
    dt_i = t_face * t_face / tau_i
    dt_j = t_face * t_face / tau_j
    flux = u[geo.i] - u[geo.j]
    n = geo.n
    if bdata is None:
        ud = np.zeros(len(geo.dfaces))
    else:
        ud = bdata.dirichlet_values
    rows = np.concatenate([geo.i, geo.i, geo.j, geo.j, geo.dcell])
    cols = np.concatenate([geo.i, geo.j, geo.i, geo.j, geo.dcell])
    vals = np.concatenate([
        dt_i * flux, dt_j * flux, -dt_i * flux, -dt_j * flux,
        tau_d * (u[geo.dcell] - ud),
    ])
    dl_dy = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    nq = len(geo.nfaces)
    dl_dq = sp.csr_matrix((-geo.nlen, (geo.ncell, np.arange(nq))), shape=(n, nq))
    return dl_dy, dl_dq


def boundary_fluxes(mesh, u, y, dirichlet_values):
    """Outward volumetric flow through each Dirichlet face."""
    geo = _geometry(mesh)
    _, _, _, _, tau_d = _coefficients(geo, _check_y(mesh, y))
    return tau_d * (np.asarray(u)[geo.dcell] - np.asarray(dirichlet_values))


def dump_system(system, prefix):
    """Write ``<prefix>_A.csv`` (row,col,value) and ``<prefix>_b.csv`` for debugging."""
    A = system.A.tocoo()
    with open(f"{prefix}_A.csv", "w") as fh:
        fh.write("row,col,value\n")
        for r, c, v in zip(A.row.tolist(), A.col.tolist(), A.data.tolist()):
            fh.write(f"{r},{c},{v!r}\n")
    with open(f"{prefix}_b.csv", "w") as fh:
        fh.write("row,value\n")
        for r, v in enumerate(system.b.tolist()):
            fh.write(f"{r},{v!r}\n")
