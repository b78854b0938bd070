"""Small dense-tensor engine with reverse-mode autodiff."""

from . import ops
from .gradcheck import finite_diff_check
from .tensor import (
    NumericsError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    is_recording,
    no_grad,
    precision,
)

__all__ = [
    "ops",
    "finite_diff_check",
    "NumericsError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "default_dtype",
    "is_recording",
    "no_grad",
    "precision",
]
