"""
Per-dataset task losses.
"""
import logging
from typing import Union

import numpy as np

from hetmoe.autograd import ops
from hetmoe.autograd.tensor import Tensor
from hetmoe.core.exceptions import ShapeError
from hetmoe.models.schemas import TaskKind

logger = logging.getLogger(__name__)


def task_loss(head_output: Tensor, target: Union[np.ndarray, Tensor], task_kind: Union[TaskKind, str]) -> Tensor:
    """Cross-entropy over logits for classification, mean squared error for regression."""
    kind = TaskKind(task_kind)
    if kind == TaskKind.CLASSIFICATION:
        return ops.cross_entropy(head_output, np.asarray(target))

    target = target if isinstance(target, Tensor) else Tensor(target)
    if target.shape != head_output.shape:
        raise ShapeError(f"regression target shape {target.shape} does not match output shape {head_output.shape}")
    return ops.mse(head_output, target)
