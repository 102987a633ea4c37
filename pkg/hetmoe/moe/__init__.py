"""
Mixture-of-experts layers with dataset-specific Top-K routers.
"""
from .expert import Expert
from .router import GateDecision, Router, gate
from .layer import MoELayer, moe_forward, route

__all__ = [
    'Expert',
    'GateDecision',
    'Router',
    'gate',
    'MoELayer',
    'moe_forward',
    'route',
]
