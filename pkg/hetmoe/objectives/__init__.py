"""
Task losses, the dataset-expert MI loss and its buffered surrogate.
"""
from .buffer import JointBuffer, buffer_update
from .losses import task_loss
from .mutual_info import (
    UsageSnapshot,
    batch_usage,
    mi_loss_exact,
    mi_loss_surrogate,
    mi_loss_tensor,
    mutual_information,
    surrogate_from_matrix,
    usage_mutual_information,
)

__all__ = [
    'JointBuffer',
    'buffer_update',
    'task_loss',
    'UsageSnapshot',
    'batch_usage',
    'mi_loss_exact',
    'mi_loss_surrogate',
    'mi_loss_tensor',
    'mutual_information',
    'surrogate_from_matrix',
    'usage_mutual_information',
]
