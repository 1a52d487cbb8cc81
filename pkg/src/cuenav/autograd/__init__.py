"""Minimal reverse-mode autodiff engine sized for desk-scale image models."""
from . import functional
from .checkpoint import CheckpointError, load_into, read_checkpoint, save_checkpoint
from .gradcheck import check_gradients, relative_error
from .module import Module, he_normal
from .optim import Adam, adam_step
from .tensor import Buffer, Parameter, Tensor, as_tensor, default_dtype, grad_enabled, no_grad, precision

__all__ = [
    "Adam", "Buffer", "CheckpointError", "Module", "Parameter", "Tensor", "adam_step", "as_tensor", "check_gradients",
    "default_dtype", "functional", "grad_enabled", "he_normal", "load_into", "no_grad",
    "precision", "read_checkpoint", "relative_error", "save_checkpoint",
]
