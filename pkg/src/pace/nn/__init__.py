"""Minimal reverse-mode autodiff stack used by the forecasting model."""

from .tensor import Tensor, backward, as_tensor, no_grad
from .optim import Adam
from . import functional
from . import rng

__all__ = ["Tensor", "backward", "as_tensor", "no_grad", "Adam",
           "functional", "rng"]
