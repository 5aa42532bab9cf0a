"""Minimal tensor engine: autodiff, NN ops, optimizer, checkpoints."""

from . import checkpoint, module, ops, optim
from .gradcheck import grad_check
from .tensor import ShapeError, Tensor

__all__ = ["Tensor", "ShapeError", "grad_check", "ops", "module", "optim", "checkpoint"]
