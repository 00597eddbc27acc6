"""Numerical laboratory for elliptic systems -Lap_g u = H(u) on chart-described
Riemannian manifolds: metric calculus, discrete Laplace-Beltrami operators,
solvers, stability classification and experiment reports."""

from .discretization import Grid, assemble_laplacian
from .geometry import make_chart
from .stability import classify_stability
from .system import make_nonlinearity, newton_solve

__all__ = [
    "Grid",
    "assemble_laplacian",
    "classify_stability",
    "make_chart",
    "make_nonlinearity",
    "newton_solve",
]
__version__ = "0.1.0"
