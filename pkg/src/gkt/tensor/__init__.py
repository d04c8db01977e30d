"""Minimal float32 tensor library with reverse-mode differentiation."""

from . import functional
from .optim import SGD, Adam, Optimizer, OptimizerState, adam_step, sgd_momentum_step
from .tensor import Tape, TapeError, Tensor, backward, current_tape

__all__ = [
    "Adam",
    "Optimizer",
    "OptimizerState",
    "SGD",
    "Tape",
    "TapeError",
    "Tensor",
    "adam_step",
    "backward",
    "current_tape",
    "functional",
    "sgd_momentum_step",
]
