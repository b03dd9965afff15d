"""Numerical laboratory for interior estimates of sigma_2 Hessian and curvature equations.

Submodules
----------
field_core      grids, fields, masks, finite differences, FLD I/O
sigma2          pointwise sigma_2 algebra on spectra and matrices
graph_geometry  graph hypersurface quantities and surface operators
manufactured    closed-form test problems
jacobi          trace and boundary Jacobi residuals
barrier         tube gap, cutting functions, Omega and the cut-off
moser           exponent schedules, W^{2,p} ledgers, C^{1,1} ratios
solver          damped Newton solver (scikit-learn style estimator)
audit           end-to-end pipeline and the independence audit
"""

__version__ = "0.1.0"

from .field_core import Grid, RegionMask, ScalarField, SymmetricMatrixField, VectorField  # noqa: E402
from .solver import Sigma2Solver, solve_dirichlet  # noqa: E402

__all__ = [
    "Grid",
    "RegionMask",
    "ScalarField",
    "SymmetricMatrixField",
    "VectorField",
    "Sigma2Solver",
    "solve_dirichlet",
    "__version__",
]
