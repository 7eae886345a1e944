"""Minimal dense-tensor engine with reverse-mode differentiation."""

from src.autodiff import ops
from src.autodiff.gradcheck import finite_difference_check
from src.autodiff.tensor import Tape, Tensor, active_tape, backward, get_default_dtype, precision

__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "finite_difference_check",
    "get_default_dtype",
    "ops",
    "precision",
]
