import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pickleflow import mesh as M

MIXED = {"left": "dirichlet", "right": "dirichlet", "bottom": "neumann", "top": "noflow"}


def test_unit_cell():
    m = M.build_rect_mesh(1, 1, 1, 1, "dirichlet")
    assert m.n_cells == 1
    assert len(m.boundary_faces) == 4
    assert m.cell_areas[0] == pytest.approx(1.0)


def test_two_cells_share_one_face():
    m = M.build_rect_mesh(2, 1, 2, 1, {"left": "dirichlet", "right": "dirichlet",
                                        "bottom": "noflow", "top": "noflow"})
    f = m.interior_faces
    assert len(f) == 1
    assert m.face_lengths[f[0]] == pytest.approx(1.0)
    np.testing.assert_allclose(m.face_normals[f[0]], [1.0, 0.0])
    assert tuple(m.face_cells[f[0]]) == (0, 1)


def _enumerate_faces(nx, ny):
    # independent count: every cell edge keyed by its sorted node pair
    edges = {}
    for j in range(ny):
        for i in range(nx):
            n0 = j * (nx + 1) + i
            quad = [n0, n0 + 1, n0 + nx + 2, n0 + nx + 1]
            for a, b in zip(quad, quad[1:] + quad[:1]):
                edges.setdefault(tuple(sorted((a, b))), []).append((i, j))
    interior = sum(1 for v in edges.values() if len(v) == 2)
    return interior, len(edges) - interior


def test_face_counts_4x4():
    m = M.build_rect_mesh(4, 4, 1, 1, MIXED)
    assert m.n_cells == 16
    assert (len(m.interior_faces), len(m.boundary_faces)) == _enumerate_faces(4, 4) == (24, 16)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7))
def test_interior_face_formula(nx, ny):
    m = M.build_rect_mesh(nx, ny, 1.0, 2.0, MIXED)
    assert len(m.interior_faces) == nx * (ny - 1) + ny * (nx - 1)
    # interior normals point from the first cell to the second
    f = m.interior_faces
    d = m.cell_centroids[m.face_cells[f, 1]] - m.cell_centroids[m.face_cells[f, 0]]
    assert np.all(np.sum(d * m.face_normals[f], axis=1) > 0)
    # markers partition the boundary
    b = set(m.boundary_faces.tolist())
    parts = [set(m.dirichlet_faces.tolist()), set(m.neumann_faces.tolist()), set(m.noflow_faces.tolist())]
    assert set().union(*parts) == b
    assert sum(len(p) for p in parts) == len(b)


def test_rect_mesh_rejects_bad_dimensions():
    with pytest.raises(ValueError):
        M.build_rect_mesh(0, 2)
    with pytest.raises(ValueError):
        M.build_rect_mesh(2, 2, Lx=-1.0)


def test_round_trip(tmp_path):
    m = M.build_rect_mesh(3, 3, 1, 1, MIXED)
    M.save_mesh(m, tmp_path / "m.json")
    m2 = M.load_mesh(tmp_path / "m.json")
    np.testing.assert_array_equal(m.cells, m2.cells)
    np.testing.assert_array_equal(m.face_cells, m2.face_cells)
    np.testing.assert_array_equal(m.face_markers, m2.face_markers)
    np.testing.assert_allclose(m.nodes, m2.nodes)


def _doc(m):
    return M.mesh_to_dict(m)


def test_three_cells_on_one_face_rejected(tmp_path):
    doc = _doc(M.build_rect_mesh(2, 1, 2, 1, "dirichlet"))
    # a third cell folded back over the shared edge (nodes 1 and 4)
    doc["nodes"].append([1.5, 0.5])
    doc["cells"].append([1, 6, 4, 1][:3] + [len(doc["nodes"]) - 1])
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(M.MeshError):
        M.load_mesh(tmp_path / "bad.json")


def test_clockwise_cell_named():
    doc = _doc(M.build_rect_mesh(2, 2, 1, 1, "dirichlet"))
    doc["cells"][3] = doc["cells"][3][::-1]
    with pytest.raises(M.MeshError, match="cell 3"):
        M.mesh_from_dict(doc)


def test_dangling_node_rejected():
    doc = _doc(M.build_rect_mesh(1, 1, 1, 1, "dirichlet"))
    doc["nodes"].append([5.0, 5.0])
    with pytest.raises(M.MeshError):
        M.mesh_from_dict(doc)


def test_unknown_marker_rejected():
    doc = _doc(M.build_rect_mesh(1, 1, 1, 1, "dirichlet"))
    doc["boundary"][0]["marker"] = "robin"
    with pytest.raises(M.MeshError):
        M.mesh_from_dict(doc)


def test_refine_single_cell():
    m = M.build_rect_mesh(1, 1, 1, 1, "dirichlet")
    fine, parent = M.refine_uniform(m)
    assert fine.n_cells == 4
    np.testing.assert_allclose(fine.cell_areas, 0.25)
    np.testing.assert_array_equal(parent, [0, 0, 0, 0])
    assert len(fine.dirichlet_faces) == 8


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.floats(0.1, 10), st.floats(0.1, 10))
def test_refine_preserves_area(nx, ny, lx, ly):
    m = M.build_rect_mesh(nx, ny, lx, ly, MIXED)
    fine, parent = M.refine_uniform(m)
    assert fine.cell_areas.sum() == pytest.approx(m.cell_areas.sum(), rel=1e-12)
    assert np.all(np.bincount(parent) == 4)
    assert len(fine.neumann_faces) == 2 * len(m.neumann_faces)


def test_refine_distorted_quad_matches_area():
    nodes = np.array([[0, 0], [2, 0], [2.5, 1.5], [0.2, 1.0]])
    m = M.Mesh.from_cells(nodes, [[0, 1, 2, 3]],
                          {(0, 1): "dirichlet", (1, 2): "dirichlet", (2, 3): "noflow", (3, 0): "noflow"})
    fine, _ = M.refine_uniform(m)
    assert fine.cell_areas.sum() == pytest.approx(m.cell_areas[0], rel=1e-12)


def test_refine_counts_scale_by_four():
    m = M.build_rect_mesh(5, 3, 1, 1, MIXED)
    f1, _ = M.refine_uniform(m)
    f2, _ = M.refine_uniform(f1)
    assert (f1.n_cells, f2.n_cells) == (60, 240)


def test_coarsen_geometric():
    parent = np.array([0, 0, 0, 0])
    assert M.coarsen_field_geometric(np.exp([1.0, 2, 3, 4]), parent)[0] == pytest.approx(np.exp(2.5))
    assert M.coarsen_field_geometric(np.full(4, 3.7), parent)[0] == pytest.approx(3.7)
    assert M.coarsen_field_geometric(np.array([1.0, 16, 1, 16]), parent)[0] == pytest.approx(4.0)
    with pytest.raises(ValueError):
        M.coarsen_field_geometric(np.array([1.0, 0, 1, 1]), parent)


def test_wells_deduplicated_in_first_occurrence_order():
    m = M.build_rect_mesh(4, 4, 1, 1, MIXED)
    pts = [[0.9, 0.9], [0.1, 0.1], [0.91, 0.92], [0.12, 0.13]]
    np.testing.assert_array_equal(M.map_wells_to_cells(m, pts), [15, 0])


def test_well_on_shared_edge_goes_to_lowest_cell():
    m = M.build_rect_mesh(2, 2, 1, 1, MIXED)
    assert M.map_wells_to_cells(m, [[0.5, 0.25]])[0] == 0
    assert M.map_wells_to_cells(m, [[0.5, 0.5]])[0] == 0
    assert M.map_wells_to_cells(m, [[0.75, 0.5]])[0] == 1


def test_well_outside_named():
    m = M.build_rect_mesh(2, 2, 1, 1, MIXED)
    with pytest.raises(ValueError, match="point 1"):
        M.map_wells_to_cells(m, [[0.5, 0.5], [1.5, 0.5]])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=30))
def test_wells_unique_and_contain_points(points):
    m = M.build_rect_mesh(5, 4, 1, 1, MIXED)
    cells = M.map_wells_to_cells(m, points)
    assert len(set(cells.tolist())) == len(cells)
    owner = M.map_wells_to_cells(m, points, return_unique=False)
    assert set(owner.tolist()) == set(cells.tolist())
    for p, c in zip(points, owner):
        lo, hi = m.nodes[m.cells[c]].min(0), m.nodes[m.cells[c]].max(0)
        assert np.all(np.array(p) >= lo - 1e-12) and np.all(np.array(p) <= hi + 1e-12)


def test_cell_field_csv_round_trip(tmp_path):
    v = np.random.default_rng(0).standard_normal(7)
    M.save_cell_field(v, tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "cell_index,value"
    np.testing.assert_array_equal(M.load_cell_field(tmp_path / "f.csv", 7), v)


def test_observation_set_rejects_duplicates():
    with pytest.raises(ValueError):
        M.ObservationSet([1, 1], [0.0, 1.0], [], [])
    obs = M.ObservationSet.from_fields([2, 0], np.arange(3.0), [1], np.arange(3.0) * 2)
    assert (obs.n_ys, obs.n_us) == (2, 1)
    np.testing.assert_array_equal(obs.y_values, [2.0, 0.0])
