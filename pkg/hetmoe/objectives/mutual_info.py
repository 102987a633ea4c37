"""
Dataset-expert mutual information: the exact loss and the buffered surrogate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Tuple

import numpy as np

from hetmoe.autograd import ops
from hetmoe.autograd.tensor import Tensor
from hetmoe.core.exceptions import DomainError
from hetmoe.objectives.buffer import JointBuffer

if TYPE_CHECKING:
    from hetmoe.moe.router import GateDecision

logger = logging.getLogger(__name__)


@dataclass
class UsageSnapshot:
    """
    Per-batch usage statistics carrying gradients.

    Only the sampled dataset's row of P(D, E) is non-zero; it is held as
    ``p_row`` over the router's columns ``expert_ids``.
    """

    dataset_id: int
    n_datasets: int
    expert_ids: Tuple[int, ...]
    p_cond: Tensor
    p_row: Tensor

    @property
    def p_expert(self) -> np.ndarray:
        """P(E) = column sums of the joint; equal to the single populated row."""
        return self.p_row.data.copy()

    def p_joint(self, dataset_ids: Sequence[int], expert_ids: Sequence[int]) -> np.ndarray:
        """Dense [M x N] joint with zero rows for datasets not in this batch."""
        matrix = np.zeros((len(dataset_ids), len(expert_ids)), dtype=np.float64)
        cols = {e: j for j, e in enumerate(expert_ids)}
        i = list(dataset_ids).index(self.dataset_id)
        for value, e in zip(self.p_row.data, self.expert_ids):
            matrix[i, cols[e]] = value
        return matrix


def batch_usage(decision: "GateDecision", dataset_id: int, n_datasets: int) -> UsageSnapshot:
    """
    P(E | D_i) as the batch mean of the full softmax gate, and P(D_i, E) = P(E | D_i) / M.
    """
    p_cond = ops.mean(decision.probs, axis=0)
    p_row = ops.scale(p_cond, 1.0 / n_datasets)
    return UsageSnapshot(
        dataset_id=dataset_id,
        n_datasets=n_datasets,
        expert_ids=decision.expert_ids,
        p_cond=p_cond,
        p_row=p_row,
    )


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def mi_loss_exact(p_joint: np.ndarray) -> float:
    """H(D, E) - H(D) - H(E) = -I(D; E), with 0 log 0 = 0."""
    p = np.asarray(p_joint, dtype=np.float64)
    if p.ndim != 2:
        raise DomainError(f"p_joint must be a matrix, got shape {p.shape}")
    if np.any(p < 0):
        raise DomainError("p_joint has negative entries")
    return _entropy(p.ravel()) - _entropy(p.sum(axis=1)) - _entropy(p.sum(axis=0))


def mutual_information(p_joint: np.ndarray) -> float:
    return -mi_loss_exact(p_joint)


def mi_loss_tensor(p_joint: Tensor, p_dataset: Optional[np.ndarray] = None) -> Tensor:
    """
    Tape-tracked -I(D; E) for a strictly positive joint.

    With ``p_dataset`` given, H(D) is a constant and contributes no gradient.
    """
    def neg_plogp(p: Tensor) -> Tensor:
        return ops.scale(ops.sum(ops.mul(p, ops.log(p))), -1.0)

    h_joint = neg_plogp(p_joint)
    h_expert = neg_plogp(ops.sum(p_joint, axis=0))
    if p_dataset is None:
        h_dataset = neg_plogp(ops.sum(p_joint, axis=1))
    else:
        h_dataset = Tensor(_entropy(np.asarray(p_dataset, dtype=np.float64)))
    return ops.sub(ops.sub(h_joint, h_dataset), h_expert)


def surrogate_from_matrix(p_joint: Tensor, b: np.ndarray, floor: float = 1e-8) -> Tensor:
    """
    -Σ_ij (1 + log B_ij) P_ij + Σ_j (1 + log Σ_i B_ij) P_j with B held constant.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != p_joint.shape:
        raise DomainError(f"buffer shape {b.shape} does not match joint shape {p_joint.shape}")
    if np.any(b < 0):
        raise DomainError("buffer has negative entries")
    c_joint = 1.0 + np.log(np.maximum(b, floor))
    c_expert = 1.0 + np.log(np.maximum(b.sum(axis=0), floor))
    joint_term = ops.sum(ops.mul(p_joint, Tensor(c_joint)))
    expert_term = ops.sum(ops.mul(ops.sum(p_joint, axis=0), Tensor(c_expert)))
    return ops.sub(expert_term, joint_term)


def mi_loss_surrogate(snapshot: UsageSnapshot, buffer: JointBuffer) -> Tensor:
    """
    Buffered surrogate of the MI loss for the sampled dataset.

    Only row i of P(D, E) is non-zero, so P(E_j) = P(D_i, E_j) and the loss is
    Σ_j [(1 + log Σ_i B_ij) - (1 + log B_ij)] P(D_i, E_j). The P(D) term is constant
    and omitted.
    """
    i = buffer.row_index(snapshot.dataset_id)
    if not buffer.initialized[i]:
        raise DomainError(f"buffer row for dataset {snapshot.dataset_id} is not initialised")
    if np.any(buffer.values[buffer.initialized] < 0):
        raise DomainError("buffer has negative entries")
    cols = buffer.column_indices(snapshot.expert_ids)
    b_joint = np.maximum(buffer.values[i, cols], buffer.floor)
    b_expert = np.maximum(buffer.marginal()[cols], buffer.floor)
    coeff = (1.0 + np.log(b_expert)) - (1.0 + np.log(b_joint))
    return ops.sum(ops.mul(snapshot.p_row, Tensor(coeff)))


def usage_mutual_information(rows: Sequence[np.ndarray]) -> float:
    """
    I(D; E) for one layer from per-dataset usage frequencies over a common expert set.

    Each row is normalised to P(E | D_i); datasets are weighted equally.
    """
    matrix = np.asarray(rows, dtype=np.float64)
    totals = matrix.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise DomainError("every dataset needs some expert usage")
    p_joint = matrix / totals / matrix.shape[0]
    return mutual_information(p_joint)
