"""Experiment driver: configuration, pipeline stages, reporting and the command line."""

from .config import ExperimentConfig, load_config
from .pipeline import Workspace, run_all

__all__ = ["ExperimentConfig", "load_config", "Workspace", "run_all"]
