"""Resilient constrained learning: relaxation-aware primal-dual solvers and oracles."""

from . import instances  # noqa: F401  (registers closed-form evaluators)
from .problem import ProblemInstance, RelaxationCost
from .solver import DivergenceError, SolverConfig, run

__all__ = ["ProblemInstance", "RelaxationCost", "DivergenceError", "SolverConfig", "run"]
__version__ = "0.1.0"
