"""Learning ODE vector fields from noisy time series with an implicit data network."""
from .data import TimeSeries, add_noise, get_system, lowpass_filter, simulate_truth, subsample_irregular, truth_field
from .experiment import ExperimentConfig, field_error, load_config, run_experiment
from .nets import NetworkParams, NetworkSpec
from .solvers import SolverConfig, SolverError
from .training import (DynamicsModel, LossWeights, TrainingError, TrainSchedule, train_imp_node,
                       train_std_node_baseline, wrap_second_order)

__all__ = [
    "TimeSeries", "add_noise", "get_system", "lowpass_filter", "simulate_truth", "subsample_irregular",
    "truth_field", "ExperimentConfig", "field_error", "load_config", "run_experiment", "NetworkParams",
    "NetworkSpec", "SolverConfig", "SolverError", "DynamicsModel", "LossWeights", "TrainingError",
    "TrainSchedule", "train_imp_node", "train_std_node_baseline", "wrap_second_order",
]
