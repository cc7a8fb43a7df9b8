"""Experiment harness: configs, protocols, sweeps, reports, CLI plumbing."""

from .config import ConfigError, ExperimentConfig, config_hash, load_config, validate_config
from .experiments import ExperimentResult, run_experiment
from .sweep import rho_grid_search

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "config_hash",
    "load_config",
    "rho_grid_search",
    "run_experiment",
    "validate_config",
]
