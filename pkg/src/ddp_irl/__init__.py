"""Constrained DDP solvers, solution gradients and inverse reinforcement learning."""

from .problem import OCProblem, Trajectory, DivergenceError, rollout, evaluate_cost
from .solver import (IpddpConfig, SolveResult, solve_ipddp, solve_active_set,
                     solve_unconstrained, SolverError)
from .gradient import TrajectoryGradient, trajectory_gradient, pdp_oracle_gradient
from .benchmarks import make_system, parameter_residual, NAMES as BENCHMARKS
from .irl_open import OpenLoopConfig, OpenLoopDemo, run_open_loop
from .irl_closed import (ClosedLoopDemo, LMConfig, NoiseModel, generate_closed_loop_demo,
                         run_closed_loop)
from .ioc_linear import build_recovery_system, recover_parameters, rank_profile

__version__ = "0.1.0"
