"""Backdoor injection into distribution-matching dataset condensation."""

from .core import ConfigError, LabeledDataset, RunConfig
from .harness import BaselineSpec, Pipeline, StageError, emit_report, run_baseline_naive, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "BaselineSpec", "ConfigError", "LabeledDataset", "Pipeline", "RunConfig", "StageError", "emit_report",
    "run_baseline_naive", "run_pipeline",
]
