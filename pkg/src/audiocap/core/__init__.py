"""Minimal differentiable-computation substrate: tensors, Adam, checkpoints."""

from audiocap.core.checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from audiocap.core.gradcheck import NumericError, grad_check, grad_check_params
from audiocap.core.optim import AdamConfig, AdamState, ContractError, optimizer_step
from audiocap.core.tensor import Tensor, no_grad

__all__ = [
    "AdamConfig",
    "AdamState",
    "Checkpoint",
    "CheckpointError",
    "ContractError",
    "NumericError",
    "Tensor",
    "grad_check",
    "grad_check_params",
    "load_checkpoint",
    "no_grad",
    "optimizer_step",
    "save_checkpoint",
]
