"""
Running estimate B(D, E) of the dataset-expert joint usage distribution.
"""
from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Any, Dict, Iterable, List

import numpy as np

from hetmoe.core.config import settings
from hetmoe.core.exceptions import DomainError, StructuralError

if TYPE_CHECKING:
    from hetmoe.objectives.mutual_info import UsageSnapshot

logger = logging.getLogger(__name__)


class JointBuffer:
    """
    Momentum-tracked joint usage matrix, one row per dataset, one column per expert.

    Rows start uninitialised and take the first batch estimate of their dataset.
    The buffer is plain numpy state: it never enters the gradient tape.
    """

    def __init__(self, momentum: float | None = None, floor: float | None = None):
        self.momentum = settings.BUFFER_MOMENTUM if momentum is None else float(momentum)
        self.floor = settings.BUFFER_FLOOR if floor is None else float(floor)
        self.dataset_ids: List[int] = []
        self.expert_ids: List[int] = []
        self.values = np.zeros((0, 0), dtype=np.float64)
        self.initialized = np.zeros(0, dtype=bool)

    @property
    def n_datasets(self) -> int:
        return len(self.dataset_ids)

    def row_index(self, dataset_id: int) -> int:
        try:
            return self.dataset_ids.index(dataset_id)
        except ValueError:
            raise DomainError(f"buffer has no row for dataset {dataset_id}") from None

    def column_indices(self, expert_ids: Iterable[int]) -> np.ndarray:
        lookup = {e: j for j, e in enumerate(self.expert_ids)}
        try:
            return np.array([lookup[int(e)] for e in expert_ids], dtype=np.int64)
        except KeyError as exc:
            raise StructuralError(f"buffer has no column for expert {exc.args[0]}") from None

    def add_dataset(self, dataset_id: int) -> None:
        if dataset_id in self.dataset_ids:
            raise StructuralError(f"buffer already has a row for dataset {dataset_id}")
        self.dataset_ids.append(dataset_id)
        self.values = np.vstack([self.values, np.zeros((1, len(self.expert_ids)))])
        self.initialized = np.append(self.initialized, False)

    def add_experts(self, expert_ids: Iterable[int]) -> None:
        new = [int(e) for e in expert_ids]
        self.expert_ids.extend(new)
        self.values = np.hstack([self.values, np.zeros((self.n_datasets, len(new)))])

    def remove_experts(self, expert_ids: Iterable[int]) -> None:
        removed = set(int(e) for e in expert_ids)
        keep = [j for j, e in enumerate(self.expert_ids) if e not in removed]
        self.values = self.values[:, keep]
        self.expert_ids = [self.expert_ids[j] for j in keep]

    def reset_row(self, dataset_id: int) -> None:
        i = self.row_index(dataset_id)
        self.values[i] = 0.0
        self.initialized[i] = False

    def full_row(self, snapshot: "UsageSnapshot") -> np.ndarray:
        """The snapshot's P(D_i, E) spread over every buffer column (zeros elsewhere)."""
        row = np.zeros(len(self.expert_ids), dtype=np.float64)
        row[self.column_indices(snapshot.expert_ids)] = snapshot.p_row.data
        return row

    def initialize_row(self, snapshot: "UsageSnapshot") -> bool:
        """Seed an uninitialised row with the snapshot estimate; returns True if it did."""
        i = self.row_index(snapshot.dataset_id)
        if self.initialized[i]:
            return False
        self.values[i] = self.full_row(snapshot)
        self.initialized[i] = True
        logger.debug(f"buffer row for dataset {snapshot.dataset_id} initialised")
        return True

    def marginal(self) -> np.ndarray:
        """Σ_i B(D_i, E) over initialised rows."""
        return self.values[self.initialized].sum(axis=0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "momentum": self.momentum,
            "floor": self.floor,
            "dataset_ids": list(self.dataset_ids),
            "expert_ids": list(self.expert_ids),
            "values": self.values.tolist(),
            "initialized": [bool(v) for v in self.initialized],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "JointBuffer":
        buffer = cls(momentum=data["momentum"], floor=data["floor"])
        buffer.dataset_ids = [int(i) for i in data["dataset_ids"]]
        buffer.expert_ids = [int(e) for e in data["expert_ids"]]
        values = np.asarray(data["values"], dtype=np.float64)
        buffer.values = values.reshape(len(buffer.dataset_ids), len(buffer.expert_ids))
        buffer.initialized = np.asarray(data["initialized"], dtype=bool).reshape(len(buffer.dataset_ids))
        return buffer


def buffer_update(buffer: JointBuffer, snapshot: "UsageSnapshot", dataset_id: int) -> None:
    """
    B[i, :] <- m * B[i, :] + (1 - m) * P(D_i, :) for the sampled dataset only.

    Call after the loss has read the buffer.
    """
    if snapshot.dataset_id != dataset_id:
        raise StructuralError(
            f"snapshot is for dataset {snapshot.dataset_id}, update requested for {dataset_id}"
        )
    buffer.initialize_row(snapshot)
    i = buffer.row_index(dataset_id)
    m = buffer.momentum
    buffer.values[i] = m * buffer.values[i] + (1.0 - m) * buffer.full_row(snapshot)
