"""
Backbone assembly and per-dataset dispatch.
"""
from .layers import Block, Linear
from .model import ForwardResult, HeterogeneousModel, param_count

__all__ = [
    'Block',
    'Linear',
    'ForwardResult',
    'HeterogeneousModel',
    'param_count',
]
