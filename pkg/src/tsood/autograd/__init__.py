from . import ops
from .gradcheck import finite_difference_check
from .tensor import (
    GradientMap,
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    active_tape,
    backward,
    no_record,
)

__all__ = [
    "GradientMap",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "active_tape",
    "backward",
    "finite_difference_check",
    "no_record",
    "ops",
]
