"""Killed reflected diffusion: simulation, Poisson bin counts and Bayesian recovery of the diffusivity."""

from killdiff.errors import ConfigurationError, DomainError, SingularSystemError, SolverError
from killdiff.grid import Grid, Rect, make_grid

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "DomainError", "Grid", "Rect", "SingularSystemError", "SolverError", "make_grid"]
