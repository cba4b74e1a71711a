"""Optimal semi-active damping gains through reduced basis Lyapunov solves."""

from .errors import (AccuracyError, CapacityError, ConstructionError, ConvergenceError,
                     DampOptError, DivergenceError, EigenSolverError, NumericalBreakdown,
                     StabilityError, StartFailure)
from .lyap import GramianSolver, LowRankFactor, sign_solve, solve_dense
from .model import (ModalRealization, SecondOrderSystem, StructuredStateOperator,
                    assemble_operator, build_internal_damping, load_system, modal_transform,
                    save_system)
from .optimize import (OptimizationOutcome, adaptive_rbm_optimize, guarded_objective,
                       nelder_mead_box, optimize_exact, optimize_reduced, rbm_optimize)
from .rbm import (ErrorEstimate, ReducedBasis, ReducedModel, error_residual_norm,
                  estimate_error, offline_rbm, project_reduced_model, solve_reduced_gramian)
from .response import (EnergyResponseValue, exact_energy_response, quadrature_energy_response,
                       reduced_energy_response)

__version__ = "0.1.0"

__all__ = [
    "AccuracyError", "CapacityError", "ConstructionError", "ConvergenceError", "DampOptError",
    "DivergenceError", "EigenSolverError", "NumericalBreakdown", "StabilityError",
    "StartFailure", "GramianSolver", "LowRankFactor", "sign_solve", "solve_dense",
    "ModalRealization", "SecondOrderSystem", "StructuredStateOperator", "assemble_operator",
    "build_internal_damping", "load_system", "modal_transform", "save_system",
    "OptimizationOutcome", "adaptive_rbm_optimize", "guarded_objective", "nelder_mead_box",
    "optimize_exact", "optimize_reduced", "rbm_optimize", "ErrorEstimate", "ReducedBasis",
    "ReducedModel", "error_residual_norm", "estimate_error", "offline_rbm",
    "project_reduced_model", "solve_reduced_gramian", "EnergyResponseValue",
    "exact_energy_response", "quadrature_energy_response", "reduced_energy_response",
]
