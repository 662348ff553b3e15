"""Minimal differentiable-operator set sufficient to express and train the
separator; every operator carries an exact hand-derived gradient."""

from . import functional
from .optim import AdamWAmsgrad, PlateauScheduler, clip_grad_l2, global_grad_norm
from .tensor import Tensor, grad_enabled, no_grad

__all__ = [
    "AdamWAmsgrad",
    "PlateauScheduler",
    "Tensor",
    "clip_grad_l2",
    "functional",
    "global_grad_norm",
    "grad_enabled",
    "no_grad",
]
