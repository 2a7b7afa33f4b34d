"""
Error against the number of KL modes.

On the consistency instance the y and u bases are truncated to the same
number of modes. Too few modes cannot represent the truth; beyond that the
error levels off, and the relative-tolerance truncation gives nearly the
same estimate as keeping every mode.

Run: python demos/05_truncation.py
"""

from pickleflow.workbench import experiments as E

rows = E.run_truncation_sweep(E.ExperimentConfig())
print(f"{'label':>6s} {'N_y':>4s} {'N_u':>4s} {'rel l2':>8s} {'iterations':>10s}")
for r in rows:
    print(f"{r['label']:>6s} {r['n_y']:4d} {r['n_u']:4d} {r['rel_l2']:8.4f} {r['iterations']:10d}")
