"""AVM-Lab: frozen-encoder V1 response models with condition-aware modulation."""

__version__ = "0.1.0"

from .config import RunConfig, load_run_config
from .experiment import AdaptationExperiment
from .model import AvmModel, FreezePlan, ModelSpec
from .training import train_phase1, train_phase2

__all__ = [
    "AdaptationExperiment",
    "AvmModel",
    "FreezePlan",
    "ModelSpec",
    "RunConfig",
    "load_run_config",
    "train_phase1",
    "train_phase2",
]
