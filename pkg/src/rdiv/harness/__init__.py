"""Experiment harness: config parsing, drivers, CSV/JSON reporting and the CLI."""
from .config import ExperimentConfig, parse_config
from .experiments import RUNNERS, run_bench, run_bias_study, run_rate_study, run_select
from .report import ResultRow, read_csv, write_csv

__all__ = ["ExperimentConfig", "parse_config", "RUNNERS", "run_bench", "run_bias_study", "run_rate_study",
           "run_select", "ResultRow", "read_csv", "write_csv"]
