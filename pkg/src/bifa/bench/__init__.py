"""Simulation scenarios, evaluation metrics, profiling and the benchmark grid."""

from .grid import BenchConfig, run_cell, run_grid
from .metrics import (
    bartlett_scores,
    factor_count_report,
    frobenius_distance,
    mean_sd,
    prediction_mse,
    rv_coefficient,
    train_test_split,
)
from .profiling import Profile, profile
from .report import EvaluationRecord, compare_to_truth, covariance_edge_list, metric_table
from .scenarios import GroundTruth, ScenarioSpec, generate_scenario
