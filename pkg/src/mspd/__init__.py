"""Marked self-exciting point processes: simulation, moments and Poisson functional checks."""
from .errors import (ExplosionGuard, GridMismatch, MSPDError, NoConvergence, NonIntegrable,
                     NotSeparable, NotSubcritical, NumericError, ParseError, TooLarge, ValidationError)
from .kernels import DKernel, Separable, branching_matrix, mean_kernel, resolvent, spectral_radius
from .moments import covariance, expect_intensity, expect_mspd, expect_shifted
from .simulator import ScenarioSpec, StressScenario, path_rng, simulate, simulate_shifted

__all__ = [
    "ExplosionGuard", "GridMismatch", "MSPDError", "NoConvergence", "NonIntegrable", "NotSeparable",
    "NotSubcritical", "NumericError", "ParseError", "TooLarge", "ValidationError",
    "DKernel", "Separable", "branching_matrix", "mean_kernel", "resolvent", "spectral_radius",
    "covariance", "expect_intensity", "expect_mspd", "expect_shifted",
    "ScenarioSpec", "StressScenario", "path_rng", "simulate", "simulate_shifted",
]
__version__ = "0.1.0"
