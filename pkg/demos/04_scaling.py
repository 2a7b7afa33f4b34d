"""
How the two inversions scale with the number of cells.

Three nested grids (256, 1024 and 4096 cells) share the same wells and a
reference that is consistent across resolutions. PICKLE works in a fixed
number of KL coordinates, so its minimisation cost grows roughly with the
cost of one sparse matrix-vector product per residual. MAP carries one
unknown per cell and needs adjoint solves for every head observation.
Pass a smaller level list (e.g. ``0 1``) for a quick run.

Run: python demos/04_scaling.py [levels ...]
"""

import sys

from pickleflow.workbench import experiments as E

levels = [int(a) for a in sys.argv[1:]] or [0, 1, 2]
cfg = E.ExperimentConfig(n_ys=100, well_count=160, n_y=100, n_u=100, reference="smoothed",
                         methods=["pickle", "map"])
rep = E.run_scaling(cfg, levels)
for r in rep.rows:
    print(f"{r['method']:>13s} N={r['n_cells']:5d} time={r['time']:8.3f} s "
          f"rel l2={r['rel_l2']:.4f} iterations={r['iterations']}")
for m, (s, _, r2) in rep.fits.items():
    print(f"{m:>13s}: time ~ N^{s:.2f} (R^2 = {r2:.3f})")
