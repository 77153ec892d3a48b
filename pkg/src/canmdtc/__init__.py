"""Conditional adversarial networks for multi-domain text classification, on numpy."""

from .networks import CanModel, ContractError, ModelSpec, load_checkpoint, save_checkpoint
from .tensor import DomainError, GraphError, ShapeError, Tensor, finite_diff_check
from .trainer import TrainingConfig, cross_validate, evaluate, multi_source_adapt, train_loop

__version__ = "0.1.0"

__all__ = [
    "CanModel",
    "ContractError",
    "DomainError",
    "GraphError",
    "ModelSpec",
    "ShapeError",
    "Tensor",
    "TrainingConfig",
    "cross_validate",
    "evaluate",
    "finite_diff_check",
    "load_checkpoint",
    "multi_source_adapt",
    "save_checkpoint",
    "train_loop",
]
