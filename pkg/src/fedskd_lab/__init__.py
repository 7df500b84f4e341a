"""Aggregation-free, model-heterogeneous federated learning with similarity distillation."""

from .config import ExperimentConfig, load_config
from .models import ModelSpec, build_model, heterogeneous_fleet
from .protocol import generate_schedule, run_round
from .runner import run_experiment
from .skd import skd_total_loss

__all__ = [
    "ExperimentConfig",
    "ModelSpec",
    "build_model",
    "generate_schedule",
    "heterogeneous_fleet",
    "load_config",
    "run_experiment",
    "run_round",
    "skd_total_loss",
]
__version__ = "0.1.0"
