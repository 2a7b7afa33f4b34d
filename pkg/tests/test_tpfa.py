import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from pickleflow import mesh as M
from pickleflow import tpfa

LR_DIRICHLET = {"left": "dirichlet", "right": "dirichlet", "bottom": "noflow", "top": "noflow"}
MIXED = {"left": "dirichlet", "right": "dirichlet", "bottom": "neumann", "top": "noflow"}


def two_cell():
    m = M.build_rect_mesh(2, 1, 2, 1, LR_DIRICHLET)
    head = lambda x, y: np.where(x < 1, 1.0, 0.0)
    return m, tpfa.BoundaryData.from_functions(m, head=head)


def test_half_transmissibility_unit_square():
    m = M.build_rect_mesh(1, 1, 1, 1, "dirichlet")
    for f in range(4):
        assert tpfa.half_transmissibility(m, 0, f, 1.0) == pytest.approx(2.0)
        assert tpfa.half_transmissibility(m, 0, f, 2.0) == pytest.approx(4.0)
        assert tpfa.half_transmissibility(m, 0, f, np.e) == pytest.approx(2 * np.e)


def test_two_cell_assembly():
    m, bd = two_cell()
    s = tpfa.assemble(m, np.zeros(2), bd)
    np.testing.assert_allclose(s.A.toarray(), [[3.0, -1.0], [-1.0, 3.0]])
    np.testing.assert_allclose(s.b, [2.0, 0.0])
    np.testing.assert_allclose(tpfa.forward_solve(s), [0.75, 0.25], atol=1e-14)


def test_noflow_rows_sum_to_zero():
    m = M.build_rect_mesh(3, 4, 1, 1, "noflow")
    y = np.random.default_rng(0).standard_normal(m.n_cells)
    s = tpfa.assemble(m, y, tpfa.BoundaryData([], []))
    np.testing.assert_allclose(s.A @ np.ones(m.n_cells), 0.0, atol=1e-12)
    assert np.all(s.b == 0)
    with pytest.raises(tpfa.SingularSystemError):
        tpfa.forward_solve(s)


def test_constant_shift_scales_system():
    m = M.build_rect_mesh(3, 3, 1, 1, MIXED)
    bd = tpfa.BoundaryData.from_functions(m, head=lambda x, y: x, flux=0.3)
    y = np.random.default_rng(1).standard_normal(m.n_cells)
    s0 = tpfa.assemble(m, y, bd)
    s1 = tpfa.assemble(m, y + 0.7, bd)
    np.testing.assert_allclose(s1.A.toarray(), np.exp(0.7) * s0.A.toarray(), rtol=1e-13)
    # the Neumann part of b does not involve T
    dcells = m.face_cells[m.dirichlet_faces, 0]
    ncells = m.face_cells[m.neumann_faces, 0]
    only_d = np.setdiff1d(dcells, ncells)
    np.testing.assert_allclose(s1.b[only_d], np.exp(0.7) * s0.b[only_d], rtol=1e-13)


def test_symmetric_pattern():
    m = M.build_rect_mesh(5, 4, 2, 1, MIXED)
    y = np.random.default_rng(2).standard_normal(m.n_cells)
    A = tpfa.stiffness_matrix(m, y)
    assert abs(A - A.T).max() == 0.0
    nnz_per_row = np.diff(A.tocsr().indptr)
    neighbours = np.bincount(m.face_cells[m.interior_faces].ravel(), minlength=m.n_cells)
    np.testing.assert_array_equal(nnz_per_row, neighbours + 1)


def test_linear_head_exact():
    m = M.build_rect_mesh(8, 5, 2.0, 1.0, LR_DIRICHLET)
    bd = tpfa.BoundaryData.from_functions(m, head=lambda x, y: 3.0 - 1.5 * x)
    u = tpfa.solve_head(m, np.full(m.n_cells, 0.4), bd)
    np.testing.assert_allclose(u, 3.0 - 1.5 * m.cell_centroids[:, 0], atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_max_principle(seed):
    rng = np.random.default_rng(seed)
    m = M.build_rect_mesh(6, 5, 1, 1, {"left": "dirichlet", "right": "dirichlet",
                                        "bottom": "noflow", "top": "dirichlet"})
    bd = tpfa.BoundaryData(rng.uniform(-3, 4, len(m.dirichlet_faces)), [])
    u = tpfa.solve_head(m, 2 * rng.standard_normal(m.n_cells), bd)
    assert u.min() >= bd.dirichlet_values.min() - 1e-12
    assert u.max() <= bd.dirichlet_values.max() + 1e-12


def test_forward_residual_tolerance():
    m = M.build_rect_mesh(10, 10, 1, 1, MIXED)
    bd = tpfa.BoundaryData.from_functions(m, head=lambda x, y: 10 + x, flux=2.0)
    y = np.random.default_rng(3).standard_normal(m.n_cells)
    s = tpfa.assemble(m, y, bd)
    u = tpfa.forward_solve(s)
    assert np.abs(s.A @ u - s.b).max() <= 1e-10 * max(1, np.abs(s.b).max())
    assert np.abs(tpfa.residual(m, u, y, bd)).max() <= 1e-10 * max(1, np.abs(s.b).max())


def test_factorization_reuse():
    m = M.build_rect_mesh(6, 6, 1, 1, MIXED)
    bd = tpfa.BoundaryData.from_functions(m, head=1.0, flux=0.5)
    rng = np.random.default_rng(4)
    for _ in range(3):
        y = rng.standard_normal(m.n_cells)
        s = tpfa.assemble(m, y, bd)
        fac = tpfa.factorize(s)
        np.testing.assert_allclose(fac.solve(s.b), np.linalg.solve(s.A.toarray(), s.b), rtol=1e-10)
        np.testing.assert_allclose(fac.solve(s.b, trans=True), np.linalg.solve(s.A.toarray().T, s.b),
                                   rtol=1e-10)


def test_residual_locality_and_affinity():
    m = M.build_rect_mesh(5, 5, 1, 1, MIXED)
    bd = tpfa.BoundaryData.from_functions(m, head=lambda x, y: x, flux=1.0)
    rng = np.random.default_rng(5)
    y = rng.standard_normal(m.n_cells)
    u = rng.standard_normal(m.n_cells)
    r0 = tpfa.residual(m, u, y, bd)
    e = np.zeros(m.n_cells)
    e[12] = 0.1
    changed = np.flatnonzero(np.abs(tpfa.residual(m, u + e, y, bd) - r0) > 0)
    assert set(changed.tolist()) == {7, 11, 12, 13, 17}
    # l(u1 + u2) - l(u1) - l(u2) = b for an affine map u -> A u - b
    u2 = rng.standard_normal(m.n_cells)
    s = tpfa.assemble(m, y, bd)
    lhs = tpfa.residual(m, u + u2, y, bd) - r0 - tpfa.residual(m, u2, y, bd)
    np.testing.assert_allclose(lhs, s.b, atol=1e-12)


def test_cell_sets_partition():
    m = M.build_rect_mesh(4, 4, 1, 1, MIXED)
    I, D, N = tpfa.cell_sets(m)
    assert len(I) + len(D) + len(N) == m.n_cells
    np.testing.assert_array_equal(N, [0, 1, 2, 3])
    np.testing.assert_array_equal(D, [4, 7, 8, 11, 12, 15])
    np.testing.assert_array_equal(tpfa.restricted_cells(m), np.union1d(I, D))


def test_restricted_residual_ignores_flux():
    m = M.build_rect_mesh(2, 1, 2, 1, {"left": "dirichlet", "right": "neumann",
                                        "bottom": "noflow", "top": "noflow"})
    u = np.array([0.3, 0.9])
    y = np.array([0.2, -0.1])
    r = tpfa.residual_restricted(m, u, y, [1.0])
    assert r.shape == (1,)
    full1 = tpfa.residual(m, u, y, tpfa.BoundaryData([1.0], [0.0]))
    full2 = tpfa.residual(m, u, y, tpfa.BoundaryData([1.0], [5.0]))
    assert r[0] == full1[0] == full2[0]


def test_restricted_is_full_without_neumann():
    m = M.build_rect_mesh(3, 3, 1, 1, "dirichlet")
    rng = np.random.default_rng(6)
    u, y = rng.standard_normal(9), rng.standard_normal(9)
    ud = rng.standard_normal(len(m.dirichlet_faces))
    np.testing.assert_array_equal(tpfa.residual_restricted(m, u, y, ud),
                                  tpfa.residual(m, u, y, tpfa.BoundaryData(ud, [])))


def test_gradient_operator():
    m = M.build_rect_mesh(2, 2, 1, 1, MIXED)
    G = tpfa.gradient_operator(m)
    assert G.shape == (len(m.interior_faces), 4)
    np.testing.assert_allclose(G @ np.ones(4), 0.0)
    h = 0.5
    gx = G @ (m.cell_centroids[:, 0] / h)
    normals = m.face_normals[m.interior_faces]
    np.testing.assert_allclose(gx, np.where(np.abs(normals[:, 0]) > 0.5, 1.0, 0.0) / h)


def test_harmonic_average_reduces_to_five_point():
    m = M.build_rect_mesh(4, 3, 2.0, 1.5, MIXED)
    T = 2.5
    A = tpfa.stiffness_matrix(m, np.full(m.n_cells, np.log(T))).toarray()
    for f in m.interior_faces:
        i, j = m.face_cells[f]
        dist = np.linalg.norm(m.cell_centroids[i] - m.cell_centroids[j])
        assert -A[i, j] == pytest.approx(T * m.face_lengths[f] / dist, rel=1e-13)


def _central_fd(fun, x, h):
    cols = []
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.column_stack(cols)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sensitivities_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = M.build_rect_mesh(4, 4, 1, 1, MIXED)
    ud = rng.uniform(5, 10, len(m.dirichlet_faces))
    q = rng.uniform(0, 1, len(m.neumann_faces))
    y = rng.standard_normal(16)
    u = rng.uniform(5, 10, 16)
    dl_dy, dl_dq = tpfa.sensitivity_products(m, u, y, tpfa.BoundaryData(ud, q))
    h = 1e-6 * max(1.0, np.linalg.norm(y))
    fd_y = _central_fd(lambda v: tpfa.residual(m, u, v, tpfa.BoundaryData(ud, q)), y, h)
    fd_q = _central_fd(lambda v: tpfa.residual(m, u, y, tpfa.BoundaryData(ud, v)), q, 1e-6)
    assert np.linalg.norm(dl_dy.toarray() - fd_y) <= 1e-6 * np.linalg.norm(fd_y)
    np.testing.assert_allclose(dl_dq.toarray(), fd_q, atol=1e-8)


def test_flux_sensitivity_single_entry():
    m = M.build_rect_mesh(4, 4, 1, 1, MIXED)
    _, dl_dq = tpfa.sensitivity_products(m, np.zeros(16), np.zeros(16),
                                         tpfa.BoundaryData.from_functions(m, 0.0, 0.0))
    dl_dq = dl_dq.toarray()
    for k, f in enumerate(m.neumann_faces):
        col = dl_dq[:, k]
        assert np.count_nonzero(col) == 1
        assert col[m.face_cells[f, 0]] == pytest.approx(-m.face_lengths[f])


def test_sensitivity_locality():
    m = M.build_rect_mesh(5, 5, 1, 1, MIXED)
    rng = np.random.default_rng(7)
    dl_dy, _ = tpfa.sensitivity_products(m, rng.standard_normal(25), rng.standard_normal(25),
                                         tpfa.BoundaryData.from_functions(m, 1.0, 0.0))
    # y in cell 24 cannot affect the balance of cell 0
    assert dl_dy[0, 24] == 0.0
    assert sp.issparse(dl_dy)


def test_flux_conservation():
    m = M.build_rect_mesh(7, 6, 1, 1, LR_DIRICHLET)
    bd = tpfa.BoundaryData.from_functions(m, head=lambda x, y: 5 - 2 * x)
    y = np.random.default_rng(8).standard_normal(m.n_cells)
    u = tpfa.solve_head(m, y, bd)
    out = tpfa.boundary_fluxes(m, u, y, bd.dirichlet_values)
    assert abs(out.sum()) <= 1e-9 * np.abs(out).sum()


def test_single_cell_without_interior_faces():
    nodes = np.array([[0, 0], [1, 0], [1, 1], [0.0, 0.05]])
    m = M.Mesh.from_cells(nodes, [[0, 1, 2, 3]], {(0, 1): "dirichlet", (1, 2): "dirichlet",
                                                   (2, 3): "dirichlet", (3, 0): "dirichlet"})
    A = tpfa.stiffness_matrix(m, np.zeros(1))
    assert A[0, 0] > 0


def test_non_convex_cell_rejected():
    # a dart: node 3 pushed past the diagonal makes the corner at node 3 reflex
    nodes = np.array([[0, 0], [1, 0], [1, 1], [0.8, 0.3]])
    with pytest.raises(M.MeshError):
        M.Mesh.from_cells(nodes, [[0, 1, 2, 3]], {(0, 1): "dirichlet", (1, 2): "dirichlet",
                                                   (2, 3): "dirichlet", (3, 0): "dirichlet"})


def test_dump_system(tmp_path):
    m, bd = two_cell()
    tpfa.dump_system(tpfa.assemble(m, np.zeros(2), bd), str(tmp_path / "s"))
    lines = (tmp_path / "s_A.csv").read_text().splitlines()
    assert lines[0] == "row,col,value"
    assert len(lines) == 5
