"""Entropy-regularized tabular MDPs solved by natural gradient ascent-descent on a
quadratically convexified primal-dual objective."""
from .errors import (
    MaxIterExceededError,
    NonFiniteStateError,
    RegMDPError,
    SolveFailureError,
    ValidationError,
)
from .mdp import MdpModel, build_mdp, evaluate_policy, generate_random_mdp
from .oracle import OracleSolution, solve_oracle, solve_value_iteration
from .solvers import SolverConfig, SolverState, SolverTrace, Variant, ingad_step, ngad_step, run_solver

__version__ = "0.1.0"

__all__ = [
    "MaxIterExceededError", "NonFiniteStateError", "RegMDPError", "SolveFailureError",
    "ValidationError", "MdpModel", "build_mdp", "evaluate_policy", "generate_random_mdp",
    "OracleSolution", "solve_oracle", "solve_value_iteration", "SolverConfig", "SolverState",
    "SolverTrace", "Variant", "ingad_step", "ngad_step", "run_solver",
]
