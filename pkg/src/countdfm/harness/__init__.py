"""Simulation, I/O, metrics and the command line."""

from .experiment import ExperimentConfig, ExperimentReport, load_config, run_experiment, save_config
from .io import load_csv, load_model, save_model
from .metrics import MetricsReport, compute_metrics

__all__ = [
    "ExperimentConfig",
    "ExperimentReport",
    "MetricsReport",
    "compute_metrics",
    "load_config",
    "load_csv",
    "load_model",
    "run_experiment",
    "save_config",
    "save_model",
]
