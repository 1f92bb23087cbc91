"""Float64 tensor algebra, reverse-mode gradients, RNG streams and persistence."""

from . import tensor as ops
from .gradcheck import directional_grad_check, grad_check, grad_check_many
from .module import Module
from . import records
from .records import RecordFormatError
from .rng import stream
from .tensor import (
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    no_grad,
    tensor,
)

__all__ = [
    "ops",
    "directional_grad_check",
    "grad_check",
    "grad_check_many",
    "Module",
    "records",
    "RecordFormatError",
    "stream",
    "NonFiniteError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "backward",
    "no_grad",
    "tensor",
]
