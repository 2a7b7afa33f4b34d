import numpy as np
import pytest

from pickleflow import ckle, ensemble, gpr, tpfa
from pickleflow.mesh import ObservationSet, build_rect_mesh

# verdict lines of the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []

MIXED = {"left": "dirichlet", "right": "dirichlet", "bottom": "neumann", "top": "noflow"}


class SmallCase:
    """4x4 mixed-boundary mesh with full-rank bases and exact data."""

    def __init__(self, nx=4, ny=4, n_y=None, n_u=None, nugget=1e-8, seed=0):
        rng = np.random.default_rng(seed)
        self.mesh = m = build_rect_mesh(nx, ny, 1, 1, MIXED)
        n = m.n_cells
        X = m.cell_centroids
        self.ud = 12.0 - 2.0 * m.face_centroids[m.dirichlet_faces, 0]
        self.q = np.full(len(m.neumann_faces), 0.5)
        params = gpr.Matern52Params(1.0, 0.4, nugget)
        self.y_cells = np.sort(rng.choice(n, 3, replace=False))
        y_obs = 1.0 + 0.3 * rng.standard_normal(3)
        cf = gpr.condition(params, X[self.y_cells], y_obs - 1.0, X)
        self.y_field = gpr.ConditionedField(cf.mean + 1.0, cf.cov)
        # all-mode bases so the truth is representable
        self.y_basis = ckle.build_basis(self.y_field, n_terms=n_y or n)
        self.xi_star = 0.5 * rng.standard_normal(self.y_basis.n_terms)
        self.y_star = ckle.evaluate(self.y_basis, self.xi_star)
        self.u_star = tpfa.solve_head(m, self.y_star, tpfa.BoundaryData(self.ud, self.q))
        cfg = ensemble.EnsembleConfig(400, 1, self.q, np.full_like(self.q, 0.1), self.y_basis)
        self.stats = ensemble.estimate_u_stats(m, cfg, self.ud)
        self.u_basis = ckle.build_basis(self.stats, n_terms=n_u or n)
        self.u_cells = np.sort(rng.choice(n, 8, replace=False))
        self.obs = ObservationSet.from_fields(self.y_cells, self.y_star, self.u_cells, self.u_star)


@pytest.fixture(scope="session")
def small_case():
    return SmallCase()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
