"""
Inverse estimation of log-transmissivity and head for steady Darcy flow.

Modules
-------
mesh            quadrilateral meshes, refinement, well mapping, field I/O
tpfa            two-point flux finite volumes: assembly, solves, sensitivities
gpr             Matérn-5/2 kriging with likelihood-fitted hyperparameters
ckle            truncated conditional KL bases
ensemble        Monte Carlo head statistics
lsq             trust-region least squares
inverse_pickle  inversion in KL coordinates with the PDE residual as a penalty
inverse_map     per-cell MAP estimate with adjoint sensitivities
workbench       synthetic experiments and the command-line interface
"""

__version__ = "0.1.0"
