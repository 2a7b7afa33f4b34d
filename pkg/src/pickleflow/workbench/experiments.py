"""
Synthetic experiments: reference fields, observation sampling, error
metrics, method comparisons over placement replicates, runtime scaling and
Dirichlet-shift sweeps.

The standard scenario is a rectangle with prescribed head on the left and
right sides, an uncertain inflow through the bottom and a no-flow top. Every
random choice is driven by an explicit seed, so repeated runs with the same
configuration write byte-identical metric files. Wall-clock timings are kept
in separate files.
"""

from __future__ import annotations

import csv
import json
import os
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import linalg

from .. import ckle, ensemble, gpr, lsq, tpfa
from .. import inverse_map as imap
from .. import inverse_pickle as ipk
from ..mesh import (
    ObservationSet, build_rect_mesh, coarsen_field_geometric, load_cell_field, load_mesh,
    map_wells_to_cells, refine_uniform,
)

OUTPUT_ENV = "PICKLEFLOW_OUTPUT"
METHODS = ("gpr", "pickle", "map")


def output_root(default="pickleflow_out"):
    return Path(os.environ.get(OUTPUT_ENV, default))


def _rng(*keys):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


# ---------------------------------------------------------------------------
# configuration

@dataclass
class ExperimentConfig:
    """All knobs of a synthetic experiment; every field has a default.

    Mesh: ``nx`` x ``ny`` cells on ``[0, Lx] x [0, Ly]`` unless ``mesh_file``
    is set. Boundary: ``head_left``/``head_right`` on the Dirichlet sides
    (linear in ``x`` in between for other Dirichlet faces), Neumann inflow
    ``q_mean +- q_std`` on the bottom, no-flow top.

    Reference ``y``: ``reference`` is ``"gp"`` (exact Matérn draw),
    ``"smoothed"`` (kriging mean through ``reference_points`` cells of a
    GP draw) or ``"file"`` (``reference_file``), shifted by ``y_mean``.

    Wells: ``well_count`` random cells, or ``well_density`` of the cells
    capped at ``well_cap``, or centroids read from ``well_file``.
    """

    nx: int = 16
    ny: int = 16
    Lx: float = 1.0
    Ly: float = 1.0
    mesh_file: str | None = None
    boundary: dict = field(default_factory=lambda: {
        "left": "dirichlet", "right": "dirichlet", "bottom": "neumann", "top": "noflow"})
    head_left: float = 20.0
    head_right: float = 10.0
    q_mean: float = 0.5
    q_std: float = 0.1
    q_corr_length: float | None = None

    reference: str = "gp"
    y_mean: float = 2.0
    sigma: float = 1.0
    ell: float = 0.3
    reference_seed: int = 0
    reference_points: int = 50
    reference_file: str | None = None

    well_count: int | None = None
    well_density: float = 0.2
    well_cap: int = 400
    well_seed: int = 1
    well_file: str | None = None

    n_ys: int = 25
    n_us: int | None = None
    replicates: int = 10
    seed: int = 2

    methods: list = field(default_factory=lambda: ["gpr", "pickle", "map"])
    regularizer: str = "coefficient"
    alpha: float = ipk.DEFAULT_ALPHA
    beta: float = ipk.DEFAULT_BETA
    gamma: float = imap.DEFAULT_GAMMA
    n_y: int | None = None
    n_u: int | None = None
    rtol_y: float = 1e-6
    rtol_u: float = 1e-6
    n_ens: int | None = None
    ens_seed: int = 3
    flux_known: bool = False

    max_iterations: int = 500
    ftol: float = 1e-8
    xtol: float = 1e-8
    gtol: float = 1e-8
    timeout: float | None = None
    timing_repeats: int = 1

    output_dir: str | None = None

    def __post_init__(self):
        if self.n_ys < 0 or (self.n_us is not None and self.n_us < 0):
            raise ValueError("observation counts must be non-negative")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.timing_repeats < 1:
            raise ValueError("timing_repeats must be at least 1")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if self.reference not in ("gp", "smoothed", "file"):
            raise ValueError(f"unknown reference kind {self.reference!r}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown configuration keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)

    def lsq_options(self):
        return lsq.LsqOptions(ftol=self.ftol, xtol=self.xtol, gtol=self.gtol,
                              max_iterations=self.max_iterations, max_time=self.timeout)


# ---------------------------------------------------------------------------
# scenario pieces

def build_mesh(config):
    if config.mesh_file:
        return load_mesh(config.mesh_file)
    return build_rect_mesh(config.nx, config.ny, config.Lx, config.Ly, dict(config.boundary))


def dirichlet_values(mesh, config, shift=0.0):
    """Head linear in ``x`` from ``head_left`` to ``head_right``, plus ``shift``."""
    x0, x1 = mesh.bounding_box[0][0], mesh.bounding_box[1][0]
    x = mesh.face_centroids[mesh.dirichlet_faces, 0]
    s = (x - x0) / (x1 - x0)
    return config.head_left + (config.head_right - config.head_left) * s + shift


def flux_statistics(mesh, config):
    nq = len(mesh.neumann_faces)
    return np.full(nq, config.q_mean), np.full(nq, config.q_std)


def reference_flux(mesh, config):
    """One draw of the Neumann inflow, used as the true flux."""
    m, s = flux_statistics(mesh, config)
    return m + s * _rng(config.reference_seed, 7).standard_normal(len(m))


def _gp_draw(coords, sigma, ell, rng):
    if sigma == 0:
        return np.zeros(len(coords))
    p = gpr.Matern52Params(sigma, ell)
    K = gpr.covariance_matrix(coords, coords, p)
    K[np.diag_indices_from(K)] += 1e-10 * sigma ** 2
    L = linalg.cholesky(K, lower=True)
    return L @ rng.standard_normal(len(coords))


def make_reference(mesh, config):
    """Reference log-transmissivity on ``mesh``."""
    if config.reference == "file":
        return load_cell_field(config.reference_file, mesh.n_cells)
    rng = _rng(config.reference_seed)
    X = mesh.cell_centroids
    parent = _gp_draw(X, config.sigma, config.ell, rng)
    if config.reference == "gp" or config.sigma == 0:
        return config.y_mean + parent
    m = min(config.reference_points, mesh.n_cells)
    cells = np.sort(_rng(config.reference_seed, 1).choice(mesh.n_cells, m, replace=False))
    p = gpr.Matern52Params(config.sigma, config.ell)
    smooth = gpr.condition(p, X[cells], parent[cells], X, with_cov=False).mean
    return config.y_mean + smooth


def make_wells(mesh, config):
    """Unique well cells."""
    if config.well_file:
        pts = np.loadtxt(config.well_file, delimiter=",", skiprows=1, ndmin=2)[:, :2]
        return map_wells_to_cells(mesh, pts)
    n = config.well_count
    if n is None:
        n = min(int(round(config.well_density * mesh.n_cells)), config.well_cap)
    n = min(n, mesh.n_cells)
    return np.sort(_rng(config.well_seed).choice(mesh.n_cells, n, replace=False))


def sample_observations(mesh, y_ref, u_ref, wells, n_ys, n_us, seed):
    """Random well subsets for ``y`` and ``u`` data.

    ``n_us=None`` uses every well for ``u``.
    """
    wells = np.unique(np.asarray(wells, dtype=np.int64))
    if n_us is None:
        n_us = len(wells)
    if n_ys > len(wells) or n_us > len(wells):
        raise ValueError(f"requested {max(n_ys, n_us)} observations from {len(wells)} wells")
    ycells = np.sort(_rng(seed, 0).choice(wells, n_ys, replace=False))
    ucells = np.sort(_rng(seed, 1).choice(wells, n_us, replace=False)) if n_us < len(wells) else wells
    return ObservationSet.from_fields(ycells, y_ref, ucells, u_ref)


def error_metrics(estimate, reference):
    """``(relative l2, absolute l-infinity)`` error."""
    reference = np.asarray(reference, dtype=float)
    e = np.asarray(estimate, dtype=float) - reference
    nrm = np.linalg.norm(reference)
    if nrm == 0:
        raise ValueError("reference field has zero norm")
    return float(np.linalg.norm(e) / nrm), float(np.max(np.abs(e)))


# ---------------------------------------------------------------------------
# method pipelines

def condition_y(mesh, obs):
    """Kriging of ``y`` from its observations, de-meaned by the sample mean.

    Returns ``(params, field)``; ``field.mean`` includes the sample mean.
    """
    X = mesh.cell_centroids
    v = np.asarray(obs.y_values)
    m0 = float(v.mean()) if len(v) else 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", gpr.DegenerateDataWarning)
        params = gpr.fit_hyperparameters(X[obs.y_cells], v - m0)
    cf = gpr.condition(params, X[obs.y_cells], v - m0, X)
    return params, gpr.ConditionedField(cf.mean + m0, cf.cov)


def _truncate(stats_or_field, n_terms, rtol, n_cells):
    if n_terms is not None:
        return ckle.build_basis(stats_or_field, n_terms=min(n_terms, n_cells))
    return ckle.build_basis(stats_or_field, rtol=rtol, max_terms=n_cells - 1)


@dataclass
class PickleSetup:
    y_field: gpr.ConditionedField
    y_basis: ckle.CkleBasis
    u_basis: ckle.CkleBasis
    stats: ensemble.EnsembleStats
    timings: dict


def prepare_pickle(mesh, obs, config, ud, q_known=None, cache_dir=None):
    """GPR, ``y`` basis, head ensemble and ``u`` basis, with their timings."""
    t = {}
    t0 = time.perf_counter()
    _, cf = condition_y(mesh, obs)
    t["gpr"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    yb = _truncate(cf, config.n_y, config.rtol_y, mesh.n_cells)
    t["eig_y"] = time.perf_counter() - t0
    qm, qs = flux_statistics(mesh, config)
    if q_known is not None:
        qm, qs = np.asarray(q_known, dtype=float), np.zeros_like(qm)
    n_ens = config.n_ens or ensemble.default_n_ens(obs.n_us)
    ecfg = ensemble.EnsembleConfig(n_ens, config.ens_seed, qm, qs, yb, config.q_corr_length)
    t0 = time.perf_counter()
    stats = ensemble.estimate_u_stats(mesh, ecfg, ud, cache_dir=cache_dir)
    t["mc"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    ub = _truncate(stats, config.n_u, config.rtol_u, mesh.n_cells)
    t["eig_u"] = time.perf_counter() - t0
    return PickleSetup(cf, yb, ub, stats, t)


def run_pickle(mesh, obs, config, ud, setup, q_known=None):
    prob = ipk.PickleProblem(mesh, setup.y_basis, setup.u_basis, obs, ud, config.alpha,
                             config.beta, config.regularizer, q_known)
    return ipk.solve_pickle(prob, config.lsq_options())


def run_map(mesh, obs, config, ud, y_init, q_known=None):
    qm, _ = flux_statistics(mesh, config)
    prob = imap.MapProblem(mesh, obs, ud, config.gamma, q_known is not None, q_known)
    return imap.solve_map(prob, y_init, None if q_known is not None else qm, config.lsq_options())


# ---------------------------------------------------------------------------
# comparison

METRIC_COLUMNS = ("n_ys", "replicate", "method", "rel_l2", "abs_linf", "u_rel_l2",
                  "iterations", "status", "n_y", "n_u")
TIMING_COLUMNS = ("n_ys", "replicate", "method", "time", "total_time")
TABLE_ROWS = (("relative l2 error", "rel_l2"), ("absolute l-inf error", "abs_linf"),
              ("least square iterations", "iterations"), ("execution time (s)", "total_time"))


@dataclass
class ComparisonReport:
    """Per-replicate rows with ranges over replicates per method."""

    rows: list

    def methods(self):
        return [m for m in METHODS if any(r["method"] == m for r in self.rows)]

    def values(self, method, column, n_ys=None):
        return np.array([r[column] for r in self.rows if r["method"] == method
                         and (n_ys is None or r["n_ys"] == n_ys)], dtype=float)

    def range(self, method, column, n_ys=None):
        v = self.values(method, column, n_ys)
        v = v[np.isfinite(v)]
        if v.size == 0:
            return float("nan"), float("nan")
        return float(v.min()), float(v.max())

    def median(self, method, column, n_ys=None):
        v = self.values(method, column, n_ys)
        v = v[np.isfinite(v)]
        return float(np.median(v)) if v.size else float("nan")

    def write_metrics(self, path):
        _write_rows(path, METRIC_COLUMNS, self.rows)

    def write_timings(self, path):
        _write_rows(path, TIMING_COLUMNS, self.rows)

    def table(self):
        """Aligned text table of min--max ranges, one block per ``n_ys``."""
        lines = []
        for n_ys in sorted({r["n_ys"] for r in self.rows}):
            lines.append(f"N_ys = {n_ys}")
            methods = self.methods()
            lines.append(f"{'':26s}" + "".join(f"{m.upper():>24s}" for m in methods))
            for label, col in TABLE_ROWS:
                cells = []
                for m in methods:
                    lo, hi = self.range(m, col, n_ys)
                    if col == "iterations":
                        cells.append(f"{lo:.0f}--{hi:.0f}" if np.isfinite(lo) else "-")
                    else:
                        cells.append(f"{lo:.4g}--{hi:.4g}" if np.isfinite(lo) else "-")
                lines.append(f"{label:26s}" + "".join(f"{c:>24s}" for c in cells))
            lines.append("")
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _write_rows(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


@dataclass
class Scenario:
    """Mesh, truth and wells shared by all replicates of an experiment."""

    mesh: object
    y_ref: np.ndarray
    q_ref: np.ndarray
    u_ref: np.ndarray
    ud: np.ndarray
    wells: np.ndarray


def build_scenario(config, mesh=None, y_ref=None):
    mesh = build_mesh(config) if mesh is None else mesh
    y_ref = make_reference(mesh, config) if y_ref is None else y_ref
    ud = dirichlet_values(mesh, config)
    q_ref = reference_flux(mesh, config)
    u_ref = tpfa.solve_head(mesh, y_ref, tpfa.BoundaryData(ud, q_ref))
    return Scenario(mesh, y_ref, q_ref, u_ref, ud, make_wells(mesh, config))


def _row(n_ys, rep, method, y_hat, sc, u_hat=None, iterations=0, status="ok",
         time_=0.0, total=None, n_y="", n_u=""):
    rel, linf = error_metrics(y_hat, sc.y_ref)
    u_rel = error_metrics(u_hat, sc.u_ref)[0] if u_hat is not None else float("nan")
    return {"n_ys": n_ys, "replicate": rep, "method": method, "rel_l2": rel, "abs_linf": linf,
            "u_rel_l2": u_rel, "iterations": iterations, "status": status, "time": time_,
            "total_time": time_ if total is None else total, "n_y": n_y, "n_u": n_u}


def run_replicate(config, sc, rep):
    """All selected methods on one placement of the observations."""
    obs = sample_observations(sc.mesh, sc.y_ref, sc.u_ref, sc.wells, config.n_ys,
                              config.n_us, _rng(config.seed, rep).integers(2 ** 63))
    q_known = sc.q_ref if config.flux_known else None
    rows = []
    t0 = time.perf_counter()
    _, cf = condition_y(sc.mesh, obs)
    t_gpr = time.perf_counter() - t0
    if "gpr" in config.methods:
        rows.append(_row(config.n_ys, rep, "gpr", cf.mean, sc, time_=t_gpr))
    if "pickle" in config.methods:
        setup = prepare_pickle(sc.mesh, obs, config, sc.ud, q_known)
        sol = run_pickle(sc.mesh, obs, config, sc.ud, setup, q_known)
        pre = sum(setup.timings.values())
        rows.append(_row(config.n_ys, rep, "pickle", sol.y_hat, sc, sol.u_hat, sol.iterations,
                         sol.result.status, sol.wall_time, sol.wall_time + pre,
                         setup.y_basis.n_terms, setup.u_basis.n_terms))
    if "map" in config.methods:
        sol = run_map(sc.mesh, obs, config, sc.ud, cf.mean, q_known)
        rows.append(_row(config.n_ys, rep, "map", sol.y_hat, sc, sol.u_hat, sol.iterations,
                         sol.result.status, sol.wall_time))
    return rows


def run_comparison(config, out_dir=None, scenario=None, n_ys_values=None):
    """Run every replicate (and every ``n_ys`` in ``n_ys_values``).

    A replicate that raises is recorded with ``status = "failed: ..."`` and
    NaN metrics. With ``out_dir`` writes ``metrics.csv`` (deterministic),
    ``timings.csv`` and ``table.txt``.
    """
    sc = build_scenario(config) if scenario is None else scenario
    rows = []
    for n_ys in (n_ys_values or [config.n_ys]):
        cfg = replace(config, n_ys=n_ys)
        for rep in range(cfg.replicates):
            try:
                rows.extend(run_replicate(cfg, sc, rep))
            except Exception as exc:  # keep going, record the failure
                for m in cfg.methods:
                    rows.append({"n_ys": n_ys, "replicate": rep, "method": m,
                                 "rel_l2": float("nan"), "abs_linf": float("nan"),
                                 "u_rel_l2": float("nan"), "iterations": -1,
                                 "status": f"failed: {type(exc).__name__}: {exc}",
                                 "time": float("nan"), "total_time": float("nan")})
    report = ComparisonReport(rows)
    if out_dir is not None:
        d = Path(out_dir)
        report.write_metrics(d / "metrics.csv")
        report.write_timings(d / "timings.csv")
        (d / "table.txt").write_text(report.table())
    return report


# ---------------------------------------------------------------------------
# scaling

def fit_power_law(n, t):
    """Least-squares fit ``log t = a + s log n``; returns ``(s, a, r2)``."""
    x = np.log(np.asarray(n, dtype=float))
    y = np.log(np.asarray(t, dtype=float))
    if len(x) < 2:
        raise ValueError("need at least two points")
    A = np.column_stack([np.ones_like(x), x])
    (a, s), *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ np.array([a, s])
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss if ss > 0 else 1.0
    return float(s), float(a), r2


@dataclass
class ScalingReport:
    rows: list
    fits: dict

    def slope(self, method):
        return self.fits[method][0]


def _fastest(solve, repeats):
    best = None
    for _ in range(repeats):
        sol = solve()
        best = sol.wall_time if best is None else min(best, sol.wall_time)
    return sol, best


SCALING_COLUMNS = ("level", "n_cells", "method", "status", "extrapolated", "rel_l2",
                   "iterations")
SCALING_TIMING_COLUMNS = ("level", "n_cells", "method", "time", "extrapolated")


def run_scaling(config, levels=(0, 1, 2), out_dir=None):
    """Time each method on nested grids obtained by uniform refinement.

    The reference field is generated on the finest grid and coarsened by
    geometric averaging; well locations are the centroids of the wells on
    the coarsest grid, mapped onto each level. A method that hits
    ``config.timeout`` at a level is marked extrapolated and its time is
    predicted from the fit over the completed levels. Each solve is repeated
    ``config.timing_repeats`` times and the fastest wall time is kept; the
    iterates are identical across repeats. Fits are reported for
    ``"pickle"`` (minimisation only), ``"pickle_total"`` (including the
    ensemble, kriging and eigendecompositions) and ``"map"``.
    """
    levels = sorted(levels)
    if len(levels) < 2:
        raise ValueError("need at least two resolutions")
    base = build_mesh(config)
    meshes = {0: base}
    parents = {}
    for k in range(1, levels[-1] + 1):
        meshes[k], parents[k] = refine_uniform(meshes[k - 1])
    fine = meshes[levels[-1]]
    y_fine = make_reference(fine, config)
    refs = {levels[-1]: y_fine}
    for k in range(levels[-1], 0, -1):
        refs[k - 1] = np.log(coarsen_field_geometric(np.exp(refs[k]), parents[k], meshes[k - 1].n_cells))
    well_pts = base.cell_centroids[make_wells(base, config)]
    rows = []
    for lev in levels:
        msh = meshes[lev]
        sc = build_scenario(config, msh, refs[lev])
        sc.wells = map_wells_to_cells(msh, well_pts)
        obs = sample_observations(msh, sc.y_ref, sc.u_ref, sc.wells, config.n_ys, config.n_us,
                                  _rng(config.seed, 0).integers(2 ** 63))
        q_known = sc.q_ref if config.flux_known else None
        if "pickle" in config.methods:
            setup = prepare_pickle(msh, obs, config, sc.ud, q_known)
            sol, wall = _fastest(lambda: run_pickle(msh, obs, config, sc.ud, setup, q_known),
                                 config.timing_repeats)
            rel = error_metrics(sol.y_hat, sc.y_ref)[0]
            pre = sum(setup.timings.values())
            timeout = sol.result.status == "timeout"
            rows.append(dict(level=lev, n_cells=msh.n_cells, method="pickle", time=wall,
                             status=sol.result.status, extrapolated=timeout, rel_l2=rel,
                             iterations=sol.iterations))
            rows.append(dict(level=lev, n_cells=msh.n_cells, method="pickle_total",
                             time=wall + pre, status=sol.result.status,
                             extrapolated=timeout, rel_l2=rel, iterations=sol.iterations))
        if "map" in config.methods:
            _, cf = condition_y(msh, obs)
            sol, wall = _fastest(lambda: run_map(msh, obs, config, sc.ud, cf.mean, q_known),
                                 config.timing_repeats)
            rows.append(dict(level=lev, n_cells=msh.n_cells, method="map", time=wall,
                             status=sol.result.status, extrapolated=sol.result.status == "timeout",
                             rel_l2=error_metrics(sol.y_hat, sc.y_ref)[0],
                             iterations=sol.iterations))
    fits = {}
    for m in ("pickle", "pickle_total", "map"):
        done = [r for r in rows if r["method"] == m and not r["extrapolated"]]
        if len(done) >= 2:
            fits[m] = fit_power_law([r["n_cells"] for r in done], [r["time"] for r in done])
            for r in rows:
                if r["method"] == m and r["extrapolated"]:
                    s, a, _ = fits[m]
                    r["time"] = float(np.exp(a + s * np.log(r["n_cells"])))
    report = ScalingReport(rows, fits)
    if out_dir is not None:
        d = Path(out_dir)
        _write_rows(d / "scaling.csv", SCALING_COLUMNS, rows)
        _write_rows(d / "scaling_timings.csv", SCALING_TIMING_COLUMNS, rows)
        with open(d / "scaling_fits.csv", "w") as fh:
            fh.write("method,slope,intercept,r2\n")
            for m, (s, a, r2) in fits.items():
                fh.write(f"{m},{s!r},{a!r},{r2!r}\n")
        # gnuplot-friendly columns: n_cells time, one block per method
        with open(d / "scaling.dat", "w") as fh:
            for m in fits:
                fh.write(f"# {m}\n")
                for r in rows:
                    if r["method"] == m:
                        fh.write(f"{r['n_cells']} {r['time']!r}\n")
                fh.write("\n\n")
    return report


# ---------------------------------------------------------------------------
# Dirichlet shift sweep

BC_COLUMNS = ("shift", "u_mean_rel_err", "u_max_abs_err", "y_rel_l2", "y_rel_to_base",
              "iterations", "status", "u_mean_source")


def run_bc_sweep(config, shifts=(-1.0, 0.0, 1.0), out_dir=None, scenario=None, replicate=0,
                 return_estimates=False):
    """Reuse one ensemble covariance for several shifted Dirichlet data.

    The ensemble is trained once at the base Dirichlet values. For shift 0
    the ensemble mean is used; for other shifts the head mean comes from
    the mean-transmissivity flow problem with the shifted data. With
    ``return_estimates`` returns ``(rows, {shift: y_hat})``.
    """
    sc = build_scenario(config) if scenario is None else scenario
    obs0 = sample_observations(sc.mesh, sc.y_ref, sc.u_ref, sc.wells, config.n_ys,
                               config.n_us, _rng(config.seed, replicate).integers(2 ** 63))
    q_known = sc.q_ref if config.flux_known else None
    setup = prepare_pickle(sc.mesh, obs0, config, sc.ud, q_known)
    q_mean = flux_statistics(sc.mesh, config)[0] if q_known is None else q_known
    rows, y_hats = [], {}
    for s in shifts:
        ud = sc.ud + s
        u_ref = tpfa.solve_head(sc.mesh, sc.y_ref, tpfa.BoundaryData(ud, sc.q_ref))
        obs = ObservationSet.from_fields(obs0.y_cells, sc.y_ref, obs0.u_cells, u_ref)
        if s == 0:
            ub, source = setup.u_basis, "ensemble"
        else:
            mean = ipk.transfer_to_new_bc(sc.mesh, setup.y_field.mean, q_mean, ud)
            ub, source = ipk.transferred_u_basis(setup.u_basis, mean), "transfer"
        prob = ipk.PickleProblem(sc.mesh, setup.y_basis, ub, obs, ud, config.alpha, config.beta,
                                 config.regularizer, q_known)
        sol = ipk.solve_pickle(prob, config.lsq_options())
        y_hats[s] = sol.y_hat
        rows.append({"shift": s,
                     "u_mean_rel_err": float(np.mean(np.abs(sol.u_hat - u_ref) / np.abs(u_ref))),
                     "u_max_abs_err": float(np.max(np.abs(sol.u_hat - u_ref))),
                     "y_rel_l2": error_metrics(sol.y_hat, sc.y_ref)[0],
                     "iterations": sol.iterations, "status": sol.result.status,
                     "u_mean_source": source})
    base = y_hats[0.0] if 0.0 in y_hats else y_hats[shifts[0]]
    for r in rows:
        r["y_rel_to_base"] = error_metrics(y_hats[r["shift"]], base)[0]
    if out_dir is not None:
        _write_rows(Path(out_dir) / "bc_sweep.csv", BC_COLUMNS, rows)
    return (rows, y_hats) if return_estimates else rows


# ---------------------------------------------------------------------------
# ensemble size check

def ensemble_convergence(config, start=None, max_doublings=4, tol=0.01, scenario=None):
    """Double the ensemble until the PICKLE ``y`` estimate moves less than ``tol``.

    Returns a list of ``(n_ens, relative change vs previous size)``.
    """
    sc = build_scenario(config) if scenario is None else scenario
    obs = sample_observations(sc.mesh, sc.y_ref, sc.u_ref, sc.wells, config.n_ys,
                              config.n_us, _rng(config.seed, 0).integers(2 ** 63))
    n = start or config.n_ens or ensemble.default_n_ens(obs.n_us)
    prev, out = None, []
    for _ in range(max_doublings + 1):
        cfg = replace(config, n_ens=n)
        setup = prepare_pickle(sc.mesh, obs, cfg, sc.ud)
        y = run_pickle(sc.mesh, obs, cfg, sc.ud, setup).y_hat
        change = float("nan") if prev is None else error_metrics(y, prev)[0]
        out.append((n, change))
        if prev is not None and change < tol:
            break
        prev, n = y, 2 * n
    return out


# ---------------------------------------------------------------------------
# consistency instance and truncation study

@dataclass
class ConsistencyInstance:
    """A truth that lies exactly in the span of a conditioned ``y`` basis."""

    mesh: object
    y_field: gpr.ConditionedField
    y_basis: ckle.CkleBasis
    xi_star: np.ndarray
    y_star: np.ndarray
    q_star: np.ndarray
    u_star: np.ndarray
    ud: np.ndarray
    observations: ObservationSet


def consistency_instance(config, n_modes=40, n_us=64):
    """Build ``y* = ybar + Psi_y xi*`` with ``n_modes`` conditioned modes.

    A Matérn draw is observed at ``config.n_ys`` random cells; the kriging
    field through those values gives the basis, and standard normal
    coefficients give the truth. Head data are exact at ``n_us`` random
    cells. Placement and coefficients are drawn from ``config.seed``.
    """
    mesh = build_mesh(config)
    n = mesh.n_cells
    if config.n_ys > n or n_us > n:
        raise ValueError(f"mesh has only {n} cells")
    X = mesh.cell_centroids
    parent = config.y_mean + _gp_draw(X, config.sigma, config.ell, _rng(config.reference_seed))
    ycells = np.sort(_rng(config.seed, 0).choice(n, config.n_ys, replace=False))
    ucells = np.sort(_rng(config.seed, 1).choice(n, n_us, replace=False))
    _, cf = condition_y(mesh, ObservationSet.from_fields(ycells, parent, [], parent))
    yb = ckle.build_basis(cf, n_terms=min(n_modes, n))
    xi = _rng(config.seed, 2).standard_normal(yb.n_terms)
    y_star = ckle.evaluate(yb, xi)
    ud = dirichlet_values(mesh, config)
    q_star = reference_flux(mesh, config)
    u_star = tpfa.solve_head(mesh, y_star, tpfa.BoundaryData(ud, q_star))
    obs = ObservationSet.from_fields(ycells, y_star, ucells, u_star)
    return ConsistencyInstance(mesh, cf, yb, xi, y_star, q_star, u_star, ud, obs)


def _pickle_on_instance(inst, config, y_basis, n_u=None, rtol_u=None):
    qm, qs = flux_statistics(inst.mesh, config)
    q_known = inst.q_star if config.flux_known else None
    if q_known is not None:
        qm, qs = q_known, np.zeros_like(qm)
    n_ens = config.n_ens or ensemble.default_n_ens(inst.observations.n_us)
    ecfg = ensemble.EnsembleConfig(n_ens, config.ens_seed, qm, qs, y_basis, config.q_corr_length)
    stats = ensemble.estimate_u_stats(inst.mesh, ecfg, inst.ud)
    ub = _truncate(stats, n_u, rtol_u or config.rtol_u, inst.mesh.n_cells)
    prob = ipk.PickleProblem(inst.mesh, y_basis, ub, inst.observations, inst.ud, config.alpha,
                             config.beta, config.regularizer, q_known)
    return ipk.solve_pickle(prob, config.lsq_options()), ub


CONSISTENCY_COLUMNS = ("method", "rel_l2", "abs_linf", "u_rel_l2", "iterations", "status",
                       "n_y", "n_u")


def run_consistency(config, out_dir=None, n_modes=40, n_us=64, instance=None):
    """GPR, PICKLE (basis of the instance) and MAP on the consistency instance.

    Writes ``consistency.csv`` when ``out_dir`` is given.
    """
    inst = consistency_instance(config, n_modes, n_us) if instance is None else instance
    ref = SimpleReference(inst.y_star, inst.u_star)
    rows = [_row(config.n_ys, 0, "gpr", inst.y_field.mean, ref)]
    if "pickle" in config.methods:
        sol, ub = _pickle_on_instance(inst, config, inst.y_basis, config.n_u)
        rows.append(_row(config.n_ys, 0, "pickle", sol.y_hat, ref, sol.u_hat, sol.iterations,
                         sol.result.status, sol.wall_time, n_y=inst.y_basis.n_terms,
                         n_u=ub.n_terms))
    if "map" in config.methods:
        q_known = inst.q_star if config.flux_known else None
        sol = run_map(inst.mesh, inst.observations, config, inst.ud, inst.y_field.mean, q_known)
        rows.append(_row(config.n_ys, 0, "map", sol.y_hat, ref, sol.u_hat, sol.iterations,
                         sol.result.status, sol.wall_time))
    if out_dir is not None:
        _write_rows(Path(out_dir) / "consistency.csv", CONSISTENCY_COLUMNS, rows)
    return rows


@dataclass
class SimpleReference:
    y_ref: np.ndarray
    u_ref: np.ndarray


TRUNCATION_COLUMNS = ("label", "n_y", "n_u", "rel_l2", "abs_linf", "iterations", "status")


def run_truncation_sweep(config, counts=(5, 10, 20, 40, 80, 160), out_dir=None, n_modes=40,
                         n_us=64, instance=None):
    """PICKLE error on the consistency instance against ``N_y = N_u``.

    Each count truncates the kriging field of the instance and reruns the
    head ensemble with the truncated ``y`` basis. Two extra rows use the
    ``rtol_y``/``rtol_u`` truncation (label ``"rtol"``) and every mode
    (label ``"full"``). Writes ``truncation.csv`` when ``out_dir`` is given.
    """
    inst = consistency_instance(config, n_modes, n_us) if instance is None else instance
    n = inst.mesh.n_cells
    rows = []
    plan = [(str(k), k) for k in counts if k <= n] + [("rtol", None), ("full", n)]
    for label, k in plan:
        if k is None:
            yb = _truncate(inst.y_field, None, config.rtol_y, n)
            sol, ub = _pickle_on_instance(inst, config, yb, rtol_u=config.rtol_u)
        else:
            yb = ckle.build_basis(inst.y_field, n_terms=k)
            sol, ub = _pickle_on_instance(inst, config, yb, n_u=k)
        rel, linf = error_metrics(sol.y_hat, inst.y_star)
        rows.append({"label": label, "n_y": yb.n_terms, "n_u": ub.n_terms, "rel_l2": rel,
                     "abs_linf": linf, "iterations": sol.iterations,
                     "status": sol.result.status})
    if out_dir is not None:
        _write_rows(Path(out_dir) / "truncation.csv", TRUNCATION_COLUMNS, rows)
    return rows


# ---------------------------------------------------------------------------
# known versus unknown flux

FLUX_COLUMNS = ("flux_known",) + METRIC_COLUMNS


def run_flux_comparison(config, out_dir=None, scenario=None):
    """The same replicates with the Neumann flux treated as unknown and as known.

    Writes ``flux_comparison.csv`` when ``out_dir`` is given.
    """
    sc = build_scenario(config) if scenario is None else scenario
    rows = []
    for known in (False, True):
        rep = run_comparison(replace(config, flux_known=known), scenario=sc)
        rows.extend(dict(r, flux_known=known) for r in rep.rows)
    if out_dir is not None:
        _write_rows(Path(out_dir) / "flux_comparison.csv", FLUX_COLUMNS, rows)
    return rows
