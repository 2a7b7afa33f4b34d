"""
Command-line entry point.

Every subcommand reads an optional JSON configuration (``--config``) whose
keys are the fields of :class:`ExperimentConfig`; each field can also be
overridden with a flag of the same name (``--n-ys 50``, ``--flux-known true``).
Outputs go to ``--out`` or to ``$PICKLEFLOW_OUTPUT/<subcommand>``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .. import ckle, tpfa
from .. import inverse_pickle as ipk
from ..mesh import build_rect_mesh, load_cell_field, load_mesh, save_cell_field, save_mesh
from . import experiments as E


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_config_flags(p, skip=()):
    p.add_argument("--config", help="JSON experiment configuration")
    p.add_argument("--out", help="output directory")
    g = p.add_argument_group("configuration overrides")
    for f in fields(E.ExperimentConfig):
        if f.name in skip:
            continue
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name,
                       type=_parse_value, default=None, metavar="VALUE")


def _config(args):
    cfg = E.ExperimentConfig.load(args.config) if args.config else E.ExperimentConfig()
    over = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return replace(cfg, **over) if over else cfg


def _out(args, name):
    d = Path(args.out) if args.out else E.output_root() / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _scenario_obs(cfg, replicate):
    sc = E.build_scenario(cfg)
    obs = E.sample_observations(sc.mesh, sc.y_ref, sc.u_ref, sc.wells, cfg.n_ys, cfg.n_us,
                                E._rng(cfg.seed, replicate).integers(2 ** 63))
    return sc, obs


def cmd_mesh_gen(args):
    sides = {"left": args.left, "right": args.right, "bottom": args.bottom, "top": args.top}
    m = build_rect_mesh(args.nx, args.ny, args.Lx, args.Ly, sides)
    path = _out(args, "mesh-gen") / "mesh.json"
    save_mesh(m, path)
    print(f"{m.n_cells} cells, {len(m.interior_faces)} interior faces -> {path}")


def cmd_make_ref(args):
    cfg = _config(args)
    m = E.build_mesh(cfg)
    y = E.make_reference(m, cfg)
    d = _out(args, "make-ref")
    save_cell_field(y, d / "y_ref.csv")
    print(f"reference ({cfg.reference}) on {m.n_cells} cells -> {d / 'y_ref.csv'}")


def cmd_forward(args):
    cfg = _config(args)
    m = load_mesh(args.mesh) if args.mesh else E.build_mesh(cfg)
    y = load_cell_field(args.y, m.n_cells) if args.y else E.make_reference(m, cfg)
    ud = E.dirichlet_values(m, cfg, args.shift)
    q = E.flux_statistics(m, cfg)[0]
    sys_ = tpfa.assemble(m, y, tpfa.BoundaryData(ud, q))
    u = tpfa.forward_solve(sys_)
    d = _out(args, "forward")
    save_cell_field(u, d / "u.csv")
    if args.dump:
        tpfa.dump_system(sys_, str(d / "system"))
    print(f"head range [{u.min():.6g}, {u.max():.6g}] -> {d / 'u.csv'}")


def cmd_gpr_fit(args):
    cfg = _config(args)
    sc, obs = _scenario_obs(cfg, args.replicate)
    params, cf = E.condition_y(sc.mesh, obs)
    d = _out(args, "gpr-fit")
    (d / "params.json").write_text(params.to_json())
    save_cell_field(cf.mean, d / "y_gpr.csv")
    rel, linf = E.error_metrics(cf.mean, sc.y_ref)
    print(f"sigma={params.sigma:.6g} ell={params.ell:.6g} rel_l2={rel:.6g} abs_linf={linf:.6g}")


def cmd_mc_stats(args):
    cfg = _config(args)
    sc, obs = _scenario_obs(cfg, args.replicate)
    d = _out(args, "mc-stats")
    if args.converge:
        for n, change in E.ensemble_convergence(cfg, scenario=sc):
            print(f"n_ens={n} relative change={change:.4g}")
        return
    q_known = sc.q_ref if cfg.flux_known else None
    setup = E.prepare_pickle(sc.mesh, obs, cfg, sc.ud, q_known, cache_dir=d / "cache")
    ckle.save_basis(setup.u_basis, d / "u_basis")
    ckle.save_basis(setup.y_basis, d / "y_basis")
    print(f"n_ens={setup.stats.n_ens} N_y={setup.y_basis.n_terms} N_u={setup.u_basis.n_terms} "
          f"times={json.dumps({k: round(v, 3) for k, v in setup.timings.items()})}")


def cmd_solve_pickle(args):
    cfg = replace(_config(args), regularizer=args.regularizer)
    sc, obs = _scenario_obs(cfg, args.replicate)
    q_known = sc.q_ref if cfg.flux_known else None
    setup = E.prepare_pickle(sc.mesh, obs, cfg, sc.ud, q_known)
    sol = E.run_pickle(sc.mesh, obs, cfg, sc.ud, setup, q_known)
    diag = ipk.diagnostics(sol, sc.y_ref, sc.u_ref)
    diag.update({f"time_{k}": v for k, v in setup.timings.items()})
    d = _out(args, "solve-pickle")
    ipk.write_solution_bundle(d, sol.y_hat, sol.u_hat, sol.q_hat, diag)
    print(json.dumps(diag, sort_keys=True))


def cmd_solve_map(args):
    cfg = _config(args)
    sc, obs = _scenario_obs(cfg, args.replicate)
    q_known = sc.q_ref if cfg.flux_known else None
    _, cf = E.condition_y(sc.mesh, obs)
    sol = E.run_map(sc.mesh, obs, cfg, sc.ud, cf.mean, q_known)
    diag = ipk.diagnostics(sol, sc.y_ref, sc.u_ref)
    d = _out(args, "solve-map")
    ipk.write_solution_bundle(d, sol.y_hat, sol.u_hat, sol.q_hat, diag)
    print(json.dumps(diag, sort_keys=True))


def cmd_compare(args):
    cfg = _config(args)
    d = _out(args, "compare")
    rep = E.run_comparison(cfg, d, n_ys_values=args.n_ys_values)
    print(rep.table())


def cmd_scaling(args):
    cfg = _config(args)
    d = _out(args, "scaling")
    rep = E.run_scaling(cfg, args.levels, d)
    for r in rep.rows:
        flag = " (extrapolated)" if r["extrapolated"] else ""
        print(f"{r['method']:>13s} N={r['n_cells']:6d} time={r['time']:.4g}s{flag}")
    for m, (s, _, r2) in rep.fits.items():
        print(f"{m:>13s} slope={s:.3f} R2={r2:.3f}")


def cmd_bc_sweep(args):
    cfg = _config(args)
    d = _out(args, "bc-sweep")
    rows = E.run_bc_sweep(cfg, args.shifts, d)
    for r in rows:
        print(f"shift={r['shift']:+g} mean rel head err={r['u_mean_rel_err']:.3e} "
              f"y rel l2={r['y_rel_l2']:.4f} y vs base={r['y_rel_to_base']:.3e}")


def build_parser():
    ap = argparse.ArgumentParser(prog="pickleflow", description=__doc__.strip().splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh-gen", help="write a structured rectangular mesh")
    p.add_argument("--nx", type=int, required=True)
    p.add_argument("--ny", type=int, required=True)
    p.add_argument("--Lx", type=float, default=1.0)
    p.add_argument("--Ly", type=float, default=1.0)
    for side, default in (("left", "dirichlet"), ("right", "dirichlet"),
                          ("bottom", "neumann"), ("top", "noflow")):
        p.add_argument(f"--{side}", default=default, choices=["dirichlet", "neumann", "noflow"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_mesh_gen)

    for name, func, helptext in (
        ("make-ref", cmd_make_ref, "generate a reference log-transmissivity field"),
        ("forward", cmd_forward, "solve the flow problem for a given field"),
        ("gpr-fit", cmd_gpr_fit, "fit and condition the kriging model"),
        ("mc-stats", cmd_mc_stats, "Monte Carlo head statistics and KL bases"),
        ("solve-pickle", cmd_solve_pickle, "run the KL-coordinate inversion"),
        ("solve-map", cmd_solve_map, "run the per-cell MAP inversion"),
        ("compare", cmd_compare, "compare methods over placement replicates"),
        ("scaling", cmd_scaling, "runtime scaling on nested grids"),
        ("bc-sweep", cmd_bc_sweep, "reuse trained statistics for shifted Dirichlet data"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_config_flags(p, skip=("regularizer",) if name == "solve-pickle" else ())
        p.set_defaults(func=func)
        if name in ("gpr-fit", "mc-stats", "solve-pickle", "solve-map"):
            p.add_argument("--replicate", type=int, default=0, help="observation placement index")
        if name == "forward":
            p.add_argument("--mesh", help="mesh JSON (default: from the configuration)")
            p.add_argument("--y", help="log-transmissivity CSV (default: the reference)")
            p.add_argument("--shift", type=float, default=0.0, help="add to all Dirichlet heads")
            p.add_argument("--dump", action="store_true", help="also write A and b as CSV")
        if name == "mc-stats":
            p.add_argument("--converge", action="store_true",
                           help="double n_ens until the inversion stabilises")
        if name == "solve-pickle":
            p.add_argument("--regularizer", required=True, choices=list(ipk.REGULARIZERS))
        if name == "compare":
            p.add_argument("--n-ys-values", type=int, nargs="+", help="sweep over N_ys")
        if name == "scaling":
            p.add_argument("--levels", type=int, nargs="+", default=[0, 1, 2],
                           help="refinement levels of the base mesh")
        if name == "bc-sweep":
            p.add_argument("--shifts", type=float, nargs="+", default=[-1.0, 0.0, 1.0])
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    np.set_printoptions(precision=6)
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
