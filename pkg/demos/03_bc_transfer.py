"""
Reusing head statistics for new river stages.

The Monte Carlo head covariance is trained once for the base Dirichlet
heads. For shifted heads only the mean changes; it comes from one forward
solve with the kriged transmissivity. Each shifted problem is then solved
without a new ensemble.

Run: python demos/03_bc_transfer.py
"""

import time

from pickleflow.workbench import experiments as E

cfg = E.ExperimentConfig()
t0 = time.perf_counter()
rows = E.run_bc_sweep(cfg, shifts=[-2.0, -1.0, 0.0, 1.0, 2.0])
print(f"{'shift':>6s} {'mean rel head err':>18s} {'y rel l2':>9s} {'y vs base':>10s}  source")
for r in rows:
    print(f"{r['shift']:+6.1f} {r['u_mean_rel_err']:18.2e} {r['y_rel_l2']:9.4f} "
          f"{r['y_rel_to_base']:10.2e}  {r['u_mean_source']}")
print(f"total {time.perf_counter() - t0:.1f} s including one ensemble")
