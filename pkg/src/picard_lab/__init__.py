"""Discrete-time approximation of the continuous-observation nonlinear filter.

The package simulates the hidden signal and its observation under the
reference measure, forms left-endpoint Riemann-sum likelihood weights in log
scale, estimates conditional expectations in batch and recursive particle
form, and measures how fast the weight-discretization error decays as the
grid is refined.
"""

from .experiments import (
    ConvergenceConfig,
    ConvergenceReport,
    coupled_discrepancy,
    fit_slope,
    lp_norm,
    run_convergence,
)
from .filter_engine import (
    FilterTrajectory,
    TestFunction,
    WeightedEnsemble,
    make_test_function,
    normalized_estimate,
    recursive_update,
    resample_multinomial,
    run_recursive_filter,
    unnormalized_estimate,
)
from .model_core import (
    FilteringModel,
    IntegrationError,
    NoiseTable,
    TimeGrid,
    coarsen_increments,
    euler_maruyama,
    euler_paths,
    make_model,
    make_uniform_grid,
    sample_ensemble_increments,
    sample_increments,
)
from .oracles import KalmanState, kalman_bucy, single_step_quadrature
from .weights import (
    girsanov_mean,
    log_weights_joint,
    picard_log_weight,
    picard_log_weights,
    reference_log_weight,
    reference_log_weights,
)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceConfig",
    "ConvergenceReport",
    "FilterTrajectory",
    "FilteringModel",
    "IntegrationError",
    "KalmanState",
    "NoiseTable",
    "TestFunction",
    "TimeGrid",
    "WeightedEnsemble",
    "coarsen_increments",
    "coupled_discrepancy",
    "euler_maruyama",
    "euler_paths",
    "fit_slope",
    "girsanov_mean",
    "kalman_bucy",
    "log_weights_joint",
    "lp_norm",
    "make_model",
    "make_test_function",
    "make_uniform_grid",
    "normalized_estimate",
    "picard_log_weight",
    "picard_log_weights",
    "recursive_update",
    "reference_log_weight",
    "reference_log_weights",
    "resample_multinomial",
    "run_convergence",
    "run_recursive_filter",
    "sample_ensemble_increments",
    "sample_increments",
    "single_step_quadrature",
    "unnormalized_estimate",
]
