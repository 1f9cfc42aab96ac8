"""Monotone finite-difference solvers for weakly coupled HJB systems on the torus."""

from .assumptions import AssumptionReport, lint
from .errors import (
    DivergenceError,
    ErgodicInconsistencyError,
    HJBError,
    ModelDefinitionError,
    NonConvergenceError,
    PreconditionError,
    PropertyViolation,
    UsageError,
)
from .estimators import DiscountedSolver, ErgodicSolver
from .evolution import EvolutionConfig, evolve, long_time_report, smp_probe
from .grid import PeriodicGrid, SystemField
from .model import ModelSpec, available_models, builtin, coupling_analysis, model_from_dict
from .montecarlo import McConfig, estimate_value
from .steady import DiscountedConfig, epsilon_sweep, solve_discounted, solve_ergodic

__version__ = "0.1.0"

__all__ = [
    "AssumptionReport", "lint",
    "DivergenceError", "ErgodicInconsistencyError", "HJBError", "ModelDefinitionError",
    "NonConvergenceError", "PreconditionError", "PropertyViolation", "UsageError",
    "DiscountedSolver", "ErgodicSolver",
    "EvolutionConfig", "evolve", "long_time_report", "smp_probe",
    "PeriodicGrid", "SystemField",
    "ModelSpec", "available_models", "builtin", "coupling_analysis", "model_from_dict",
    "McConfig", "estimate_value",
    "DiscountedConfig", "epsilon_sweep", "solve_discounted", "solve_ergodic",
]
