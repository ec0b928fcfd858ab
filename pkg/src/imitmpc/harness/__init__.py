"""Benchmark harness: systems, configuration, sweeps, outputs and the CLI."""

from .config import ExperimentConfig, load_config, parse_config
from .experiment import build_setup, run_experiment
from .systems import make_benchmark_system, paper_matrix, random_matrix

__all__ = ["ExperimentConfig", "load_config", "parse_config", "build_setup", "run_experiment",
           "make_benchmark_system", "paper_matrix", "random_matrix"]
