"""Minimal reverse-mode autodiff over float64 numpy arrays."""

from . import ops
from .checkpoint import CheckpointError, load_weights, save_weights
from .gradcheck import grad_check
from .optim import Adam, AdamState, adam_step
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, backward, get_tape, no_grad, reset_tape

__all__ = [
    "Adam",
    "AdamState",
    "CheckpointError",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "get_tape",
    "grad_check",
    "load_weights",
    "no_grad",
    "ops",
    "reset_tape",
    "save_weights",
]
