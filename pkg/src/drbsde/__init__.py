"""Two-player stopping-game valuation through doubly reflected backward
dynamics: forward OU simulation, a per-timestep neural backward solver,
a 1-d grid dynamic-programming reference, reflection reconstruction, and
maximum-likelihood price calibration."""

__version__ = "0.1.0"

from .dynamics import (OUCoefficients, OUParams, PathBatch, SdeCoefficients, TimeGrid,
                       build_time_grid, ou_exact_conditional, simulate_paths)
from .solver import (BarrierSpec, PayoffSpec, SolveReport, TrainedSolver, TrainingHyper,
                     clamp_to_barriers, evaluate_payoff, extract_exit_times, rollout,
                     train_backward, y0_distribution)

__all__ = [
    "__version__",
    "TimeGrid",
    "OUParams",
    "OUCoefficients",
    "SdeCoefficients",
    "PathBatch",
    "build_time_grid",
    "simulate_paths",
    "ou_exact_conditional",
    "BarrierSpec",
    "PayoffSpec",
    "TrainingHyper",
    "TrainedSolver",
    "SolveReport",
    "clamp_to_barriers",
    "train_backward",
    "rollout",
    "extract_exit_times",
    "evaluate_payoff",
    "y0_distribution",
]
