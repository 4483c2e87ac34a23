"""Minimal reverse-mode automatic differentiation on numpy arrays."""
from . import ops
from .linalg import svd3
from .tensor import (
    AutodiffError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    get_dtype,
    no_grad,
    profile,
    set_profile,
)

__all__ = [
    "AutodiffError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "current_tape",
    "get_dtype",
    "no_grad",
    "ops",
    "profile",
    "set_profile",
    "svd3",
]
