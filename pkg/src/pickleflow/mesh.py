"""
Boundary-conforming quadrilateral meshes for cell-centred finite volumes.

A :class:`Mesh` stores node coordinates, counter-clockwise cells and the
derived face topology (adjacent cells, lengths, outward normals, centroids)
together with a boundary marker for every boundary face. Meshes are
immutable after construction.

Boundary markers
----------------
``"dirichlet"``
    prescribed head.
``"neumann"``
    prescribed (possibly unknown) normal inflow.
``"noflow"``
    homogeneous Neumann, always known.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INTERIOR = 0
DIRICHLET = 1
NEUMANN = 2
NOFLOW = 3

MARKER_CODES = {"dirichlet": DIRICHLET, "neumann": NEUMANN, "noflow": NOFLOW}
MARKER_NAMES = {v: k for k, v in MARKER_CODES.items()}

SIDES = ("left", "right", "bottom", "top")


class MeshError(ValueError):
    """Raised when mesh input violates a topological or geometric invariant."""


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _signed_areas(nodes, cells):
    x = nodes[cells, 0]
    y = nodes[cells, 1]
    xs = np.roll(x, -1, axis=1)
    ys = np.roll(y, -1, axis=1)
    return 0.5 * np.sum(x * ys - xs * y, axis=1)


def _area_centroids(nodes, cells, areas):
    x = nodes[cells, 0]
    y = nodes[cells, 1]
    xs = np.roll(x, -1, axis=1)
    ys = np.roll(y, -1, axis=1)
    cross = x * ys - xs * y
    cx = np.sum((x + xs) * cross, axis=1) / (6.0 * areas)
    cy = np.sum((y + ys) * cross, axis=1) / (6.0 * areas)
    return np.column_stack([cx, cy])


@dataclass(frozen=True, eq=False)
class Mesh:
    """Quadrilateral finite-volume mesh.

    Use :func:`build_rect_mesh`, :func:`load_mesh` or :meth:`Mesh.from_cells`
    rather than the raw constructor.

    Attributes
    ----------
    nodes : ndarray, shape (n_nodes, 2)
    cells : ndarray, shape (n_cells, 4)
        Node indices, counter-clockwise.
    cell_centroids : ndarray, shape (n_cells, 2)
    cell_areas : ndarray, shape (n_cells,)
    face_nodes : ndarray, shape (n_faces, 2)
        Oriented counter-clockwise with respect to the first cell.
    face_cells : ndarray, shape (n_faces, 2)
        Adjacent cells; the second entry is -1 on boundary faces.
    face_lengths, face_normals, face_centroids : ndarray
        Normals are unit vectors pointing out of the first cell.
    face_markers : ndarray of int, shape (n_faces,)
        ``INTERIOR`` for interior faces, else one of ``DIRICHLET``,
        ``NEUMANN``, ``NOFLOW``.
    """

    nodes: np.ndarray
    cells: np.ndarray
    cell_centroids: np.ndarray
    cell_areas: np.ndarray
    face_nodes: np.ndarray
    face_cells: np.ndarray
    face_lengths: np.ndarray
    face_normals: np.ndarray
    face_centroids: np.ndarray
    face_markers: np.ndarray
    _index: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_cells(cls, nodes, cells, boundary_markers):
        """Build and validate a mesh.

        Parameters
        ----------
        nodes : array_like, shape (n_nodes, 2)
        cells : array_like of int, shape (n_cells, 4)
        boundary_markers : dict
            Maps an unordered node pair ``frozenset({a, b})`` (or a sorted
            tuple) to a marker name or code. Must cover exactly the
            boundary edges.
        """
        nodes = np.asarray(nodes, dtype=float)
        cells = np.asarray(cells, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError("nodes must have shape (n_nodes, 2)")
        if cells.ndim != 2 or cells.shape[1] != 4:
            raise MeshError("cells must have shape (n_cells, 4)")
        if len(cells) == 0:
            raise MeshError("mesh has no cells")
        if not np.all(np.isfinite(nodes)):
            raise MeshError("non-finite node coordinates")
        n_nodes = len(nodes)
        bad = np.flatnonzero(np.any((cells < 0) | (cells >= n_nodes), axis=1))
        if bad.size:
            raise MeshError(f"cell {bad[0]} references a node index out of range")
        for c, quad in enumerate(cells):
            if len(set(quad.tolist())) != 4:
                raise MeshError(f"cell {c} has repeated nodes")
        used = np.zeros(n_nodes, dtype=bool)
        used[cells.ravel()] = True
        if not used.all():
            raise MeshError(f"dangling node {np.flatnonzero(~used)[0]} is not used by any cell")

        areas = _signed_areas(nodes, cells)
        for c in np.flatnonzero(areas <= 0.0):
            raise MeshError(f"cell {c} is not counter-clockwise (signed area {areas[c]:.3g})")
        # convexity: every corner turns left
        p = nodes[cells]
        e1 = np.roll(p, -1, axis=1) - p
        e0 = p - np.roll(p, 1, axis=1)
        turn = e0[..., 0] * e1[..., 1] - e0[..., 1] * e1[..., 0]
        for c in np.flatnonzero(np.any(turn <= 0.0, axis=1)):
            raise MeshError(f"cell {c} is not strictly convex")

        face_of = {}
        face_nodes = []
        face_cells = []
        for c, quad in enumerate(cells.tolist()):
            for k in range(4):
                a, b = quad[k], quad[(k + 1) % 4]
                key = (a, b) if a < b else (b, a)
                f = face_of.get(key)
                if f is None:
                    face_of[key] = len(face_nodes)
                    face_nodes.append((a, b))
                    face_cells.append([c, -1])
                else:
                    if face_cells[f][1] != -1:
                        raise MeshError(
                            f"face {f} (nodes {key}) is shared by more than two cells "
                            f"({face_cells[f][0]}, {face_cells[f][1]}, {c})"
                        )
                    if face_nodes[f] != (b, a):
                        raise MeshError(f"face {f} has inconsistent orientation between cells")
                    face_cells[f][1] = c
        face_nodes = np.array(face_nodes, dtype=np.int64)
        face_cells = np.array(face_cells, dtype=np.int64)

        markers = np.zeros(len(face_nodes), dtype=np.int64)
        is_bnd = face_cells[:, 1] < 0
        given = {}
        for key, m in boundary_markers.items():
            a, b = sorted(int(v) for v in key)
            code = MARKER_CODES.get(m, -1) if isinstance(m, str) else int(m)
            if code not in MARKER_NAMES:
                raise MeshError(f"unknown boundary marker {m!r}")
            given[(a, b)] = code
        for key, code in given.items():
            f = face_of.get(key)
            if f is None:
                raise MeshError(f"boundary entry {key} does not match any cell edge")
            if not is_bnd[f]:
                raise MeshError(f"boundary entry {key} refers to interior face {f}")
            markers[f] = code
        missing = np.flatnonzero(is_bnd & (markers == INTERIOR))
        if missing.size:
            f = missing[0]
            raise MeshError(
                f"boundary face {f} (nodes {tuple(face_nodes[f])}) has no marker; "
                "mesh is non-conforming or the boundary list is incomplete"
            )

        pa = nodes[face_nodes[:, 0]]
        pb = nodes[face_nodes[:, 1]]
        d = pb - pa
        lengths = np.hypot(d[:, 0], d[:, 1])
        normals = np.column_stack([d[:, 1], -d[:, 0]]) / lengths[:, None]
        return cls(
            nodes=_readonly(nodes),
            cells=_readonly(cells),
            cell_centroids=_readonly(_area_centroids(nodes, cells, areas)),
            cell_areas=_readonly(areas),
            face_nodes=_readonly(face_nodes),
            face_cells=_readonly(face_cells),
            face_lengths=_readonly(lengths),
            face_normals=_readonly(normals),
            face_centroids=_readonly(0.5 * (pa + pb)),
            face_markers=_readonly(markers),
        )

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_faces(self):
        return len(self.face_nodes)

    def _faces_where(self, name, mask_fn):
        if name not in self._index:
            self._index[name] = _readonly(np.flatnonzero(mask_fn()))
        return self._index[name]

    @property
    def interior_faces(self):
        return self._faces_where("interior", lambda: self.face_cells[:, 1] >= 0)

    @property
    def boundary_faces(self):
        return self._faces_where("boundary", lambda: self.face_cells[:, 1] < 0)

    @property
    def dirichlet_faces(self):
        return self._faces_where("dirichlet", lambda: self.face_markers == DIRICHLET)

    @property
    def neumann_faces(self):
        """Faces with a prescribed (non-zero or unknown) normal flux."""
        return self._faces_where("neumann", lambda: self.face_markers == NEUMANN)

    @property
    def noflow_faces(self):
        return self._faces_where("noflow", lambda: self.face_markers == NOFLOW)

    @property
    def bounding_box(self):
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    def boundary_markers(self):
        """Boundary markers keyed by sorted node pair (the serialisable form)."""
        out = {}
        for f in self.boundary_faces:
            a, b = sorted(self.face_nodes[f].tolist())
            out[(a, b)] = MARKER_NAMES[int(self.face_markers[f])]
        return out


def _as_side_markers(boundary_spec):
    if isinstance(boundary_spec, str):
        boundary_spec = {s: boundary_spec for s in SIDES}
    missing = [s for s in SIDES if s not in boundary_spec]
    if missing:
        raise ValueError(f"boundary_spec lacks a marker for side(s) {missing}")
    for s in SIDES:
        if boundary_spec[s] not in MARKER_CODES:
            raise ValueError(f"unknown marker {boundary_spec[s]!r} for side {s!r}")
    return boundary_spec


def build_rect_mesh(nx, ny, Lx=1.0, Ly=1.0, boundary_spec="dirichlet", origin=(0.0, 0.0)):
    """Structured ``nx`` x ``ny`` mesh of the rectangle ``[0, Lx] x [0, Ly]``.

    Cells are numbered row-major (x fastest). ``boundary_spec`` is a marker
    name applied to all sides, or a dict with keys ``left``, ``right``,
    ``bottom``, ``top``.

    >>> m = build_rect_mesh(2, 1, 2.0, 1.0, {"left": "dirichlet", "right": "dirichlet",
    ...                                       "bottom": "noflow", "top": "noflow"})
    >>> m.n_cells, len(m.interior_faces)
    (2, 1)
    """
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"nx and ny must be positive integers, got {nx}, {ny}")
    if not (Lx > 0 and Ly > 0):
        raise ValueError(f"domain lengths must be positive, got Lx={Lx}, Ly={Ly}")
    nx, ny = int(nx), int(ny)
    sides = _as_side_markers(boundary_spec)
    xs = origin[0] + np.linspace(0.0, Lx, nx + 1)
    ys = origin[1] + np.linspace(0.0, Ly, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return j * (nx + 1) + i

    cells = [
        (nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1))
        for j in range(ny)
        for i in range(nx)
    ]
    markers = {}
    for i in range(nx):
        markers[(nid(i, 0), nid(i + 1, 0))] = sides["bottom"]
        markers[(nid(i, ny), nid(i + 1, ny))] = sides["top"]
    for j in range(ny):
        markers[(nid(0, j), nid(0, j + 1))] = sides["left"]
        markers[(nid(nx, j), nid(nx, j + 1))] = sides["right"]
    return Mesh.from_cells(nodes, cells, markers)


def refine_uniform(mesh):
    """Split every cell into four through edge midpoints and the vertex mean.

    Returns
    -------
    fine : Mesh
    parent_map : ndarray of int, shape (4 * n_cells,)
        Coarse cell index of each fine cell.
    """
    nodes = [tuple(p) for p in mesh.nodes.tolist()]
    mid_of = {}

    def midpoint(a, b):
        key = (a, b) if a < b else (b, a)
        idx = mid_of.get(key)
        if idx is None:
            idx = len(nodes)
            pa, pb = mesh.nodes[a], mesh.nodes[b]
            nodes.append(tuple(0.5 * (pa + pb)))
            mid_of[key] = idx
        return idx

    cells = []
    for quad in mesh.cells.tolist():
        n0, n1, n2, n3 = quad
        m01, m12 = midpoint(n0, n1), midpoint(n1, n2)
        m23, m30 = midpoint(n2, n3), midpoint(n3, n0)
        c = len(nodes)
        nodes.append(tuple(mesh.nodes[quad].mean(axis=0)))
        cells.extend([
            (n0, m01, c, m30),
            (m01, n1, m12, c),
            (c, m12, n2, m23),
            (m30, c, m23, n3),
        ])
    markers = {}
    for f in mesh.boundary_faces:
        a, b = mesh.face_nodes[f].tolist()
        m = midpoint(a, b)
        name = MARKER_NAMES[int(mesh.face_markers[f])]
        markers[tuple(sorted((a, m)))] = name
        markers[tuple(sorted((m, b)))] = name
    fine = Mesh.from_cells(np.array(nodes), np.array(cells), markers)
    parent_map = np.repeat(np.arange(mesh.n_cells), 4)
    return fine, parent_map


def coarsen_field_geometric(fine_T, parent_map, n_coarse=None):
    """Geometric mean of fine-cell transmissivities over each coarse cell."""
    fine_T = np.asarray(fine_T, dtype=float)
    parent_map = np.asarray(parent_map)
    if fine_T.shape != parent_map.shape:
        raise ValueError("fine field and parent_map must have the same length")
    if np.any(~(fine_T > 0.0)):
        raise ValueError("transmissivity must be strictly positive to coarsen geometrically")
    if n_coarse is None:
        n_coarse = int(parent_map.max()) + 1
    counts = np.bincount(parent_map, minlength=n_coarse)
    if np.any(counts == 0):
        raise ValueError("parent_map leaves some coarse cells without children")
    logsum = np.bincount(parent_map, weights=np.log(fine_T), minlength=n_coarse)
    return np.exp(logsum / counts)


def map_wells_to_cells(mesh, points, return_unique=True):
    """Containing cell of each point, deduplicated in order of first occurrence.

    A point on a shared edge or vertex goes to the lowest-index cell that
    contains it.

    Raises
    ------
    ValueError
        If a point lies outside every cell; the message names the point index.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        return np.zeros(0, dtype=np.int64)
    quad = mesh.nodes[mesh.cells]  # (C, 4, 2)
    edge = np.roll(quad, -1, axis=1) - quad
    lo = quad.min(axis=1)
    hi = quad.max(axis=1)
    scale = max(float(np.ptp(mesh.nodes, axis=0).max()), 1.0)
    eps = 1e-12 * scale
    owner = np.empty(len(pts), dtype=np.int64)
    for k, p in enumerate(pts):
        cand = np.flatnonzero(np.all((p >= lo - eps) & (p <= hi + eps), axis=1))
        found = -1
        for c in cand:
            rel = p - quad[c]
            cross = edge[c, :, 0] * rel[:, 1] - edge[c, :, 1] * rel[:, 0]
            # cross is length * signed distance, so scale the tolerance by edge length
            tol = eps * np.hypot(edge[c, :, 0], edge[c, :, 1])
            if np.all(cross >= -tol):
                found = c
                break
        if found < 0:
            raise ValueError(f"point {k} at {tuple(p)} lies outside the mesh")
        owner[k] = found
    if not return_unique:
        return owner
    _, first = np.unique(owner, return_index=True)
    return owner[np.sort(first)]


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Observed ``y`` and ``u`` values at unique cell indices."""

    y_cells: np.ndarray
    y_values: np.ndarray
    u_cells: np.ndarray
    u_values: np.ndarray

    def __post_init__(self):
        for cells_name, vals_name in (("y_cells", "y_values"), ("u_cells", "u_values")):
            cells = np.asarray(getattr(self, cells_name), dtype=np.int64).ravel()
            vals = np.asarray(getattr(self, vals_name), dtype=float).ravel()
            if len(cells) != len(vals):
                raise ValueError(f"{cells_name} and {vals_name} differ in length")
            if len(np.unique(cells)) != len(cells):
                raise ValueError(f"{cells_name} contains duplicate cells")
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"{vals_name} contains non-finite values")
            object.__setattr__(self, cells_name, _readonly(cells))
            object.__setattr__(self, vals_name, _readonly(vals))

    @property
    def n_ys(self):
        return len(self.y_cells)

    @property
    def n_us(self):
        return len(self.u_cells)

    @classmethod
    def from_fields(cls, y_cells, y_field, u_cells, u_field):
        y_cells = np.asarray(y_cells, dtype=np.int64)
        u_cells = np.asarray(u_cells, dtype=np.int64)
        return cls(y_cells, np.asarray(y_field)[y_cells], u_cells, np.asarray(u_field)[u_cells])


# ---------------------------------------------------------------------------
# I/O

def mesh_to_dict(mesh):
    return {
        "nodes": mesh.nodes.tolist(),
        "cells": mesh.cells.tolist(),
        "boundary": [
            {"face": [int(a), int(b)], "marker": m}
            for (a, b), m in sorted(mesh.boundary_markers().items())
        ],
    }


def mesh_from_dict(doc):
    try:
        nodes = doc["nodes"]
        cells = doc["cells"]
        boundary = doc["boundary"]
    except (KeyError, TypeError) as exc:
        raise MeshError(f"mesh document lacks required key: {exc}") from None
    markers = {}
    for k, entry in enumerate(boundary):
        face = entry.get("face")
        if face is None or len(face) != 2:
            raise MeshError(f"boundary entry {k} must list exactly two nodes")
        key = tuple(sorted(int(v) for v in face))
        if key in markers:
            raise MeshError(f"boundary entry {k} duplicates face {key}")
        marker = entry.get("marker")
        if marker not in MARKER_CODES:
            raise MeshError(f"boundary entry {k} has unknown marker {marker!r}")
        markers[key] = marker
    return Mesh.from_cells(nodes, cells, markers)


def save_mesh(mesh, path):
    Path(path).write_text(json.dumps(mesh_to_dict(mesh)))


def load_mesh(path):
    """Read a mesh from the JSON format written by :func:`save_mesh`."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MeshError(f"cannot parse mesh file {path}: {exc}") from None
    return mesh_from_dict(doc)


def save_cell_field(values, path):
    """Write a per-cell field as CSV with header ``cell_index,value``."""
    values = np.asarray(values, dtype=float)
    with open(path, "w") as fh:
        fh.write("cell_index,value\n")
        for i, v in enumerate(values):
            fh.write(f"{i},{float(v)!r}\n")


def load_cell_field(path, n_cells=None):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    idx = data[:, 0].astype(np.int64)
    n = int(idx.max()) + 1 if n_cells is None else n_cells
    if len(idx) != n or not np.array_equal(np.sort(idx), np.arange(n)):
        raise ValueError(f"{path}: cell indices must cover 0..{n - 1} exactly once")
    out = np.empty(n)
    out[idx] = data[:, 1]
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{path}: non-finite values")
    return out
