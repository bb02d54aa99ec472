"""Structured lottery tickets for small Transformer encoders."""

from .model import MaskSet, ModelConfig, ModelParams, forward, init_params, remaining_fraction
from .tasks import TaskSpec, generate
from .tickets import ImportanceScores, compute_importance, normalize, select_super, select_tickets
from .trainer import TrainConfig, fit

__all__ = [
    "MaskSet", "ModelConfig", "ModelParams", "forward", "init_params", "remaining_fraction",
    "TaskSpec", "generate", "ImportanceScores", "compute_importance", "normalize",
    "select_super", "select_tickets", "TrainConfig", "fit",
]
__version__ = "0.1.0"
