"""Magnitude-contrastive glance-and-focus anomaly scoring on clip features."""

from .tensor import Tape, Tensor, grad_check

__all__ = ["Tape", "Tensor", "grad_check"]
__version__ = "0.1.0"
