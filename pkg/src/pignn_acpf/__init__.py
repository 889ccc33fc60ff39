"""AC power flow toolkit: Newton-Raphson reference, scenario synthesis and unrolled graph solvers."""
from .grid import Bus, BusType, Grid, Line, build_admittance, line_pi_params, to_per_unit, validate_grid
from .model import LsConfig, ModelConfig, ModelParams, unroll
from .numerics import State, compute_injections, compute_residuals, merit, nr_solve

__version__ = "0.1.0"

__all__ = [
    "Bus", "BusType", "Grid", "Line", "LsConfig", "ModelConfig", "ModelParams", "State",
    "build_admittance", "compute_injections", "compute_residuals", "line_pi_params", "merit",
    "nr_solve", "to_per_unit", "unroll", "validate_grid",
]
