"""
Reverse-mode automatic differentiation over dense float64 tensors.
"""
from .tensor import Tape, Tensor, as_tensor, current_tape, record
from . import ops

__all__ = [
    'Tape',
    'Tensor',
    'as_tensor',
    'current_tape',
    'record',
    'ops',
]
