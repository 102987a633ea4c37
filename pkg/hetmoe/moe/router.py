"""
Dataset-specific routers and Top-K gating.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

from hetmoe.autograd import ops
from hetmoe.autograd.tensor import Tensor
from hetmoe.core.exceptions import ConfigError, StructuralError
from hetmoe.moe.expert import uniform_init

logger = logging.getLogger(__name__)


class Router:
    """
    Linear gate ``x @ w_g`` for one dataset.

    Column j of ``w_g`` addresses expert ``expert_ids[j]``. The columns are
    fixed at creation: experts added later have no column, so this router can
    never select them.
    """

    def __init__(
        self,
        dataset_id: int,
        w_g: Tensor,
        expert_ids: Iterable[int],
        top_k: int,
        n_experts_at_creation: int | None = None,
    ):
        self.dataset_id = dataset_id
        self.w_g = w_g
        self.expert_ids: Tuple[int, ...] = tuple(int(e) for e in expert_ids)
        self.top_k = int(top_k)
        self.n_experts_at_creation = (
            len(self.expert_ids) if n_experts_at_creation is None else int(n_experts_at_creation)
        )
        if w_g.ndim != 2 or w_g.shape[1] != len(self.expert_ids):
            raise StructuralError(
                f"router {dataset_id}: w_g shape {w_g.shape} does not match {len(self.expert_ids)} expert ids"
            )
        if self.top_k < 1:
            raise ConfigError(f"router {dataset_id}: top_k must be >= 1, got {self.top_k}")
        if self.top_k > len(self.expert_ids):
            raise StructuralError(
                f"router {dataset_id}: top_k={self.top_k} exceeds its {len(self.expert_ids)} experts"
            )
        self._frozen = False

    @classmethod
    def create(
        cls,
        dataset_id: int,
        d: int,
        expert_ids: Iterable[int],
        top_k: int,
        rng: np.random.Generator,
    ) -> "Router":
        expert_ids = tuple(expert_ids)
        w_g = Tensor(uniform_init(rng, d, (d, len(expert_ids))), requires_grad=True)
        return cls(dataset_id, w_g, expert_ids, top_k)

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, flag: bool) -> None:
        self._frozen = bool(flag)
        self.w_g.requires_grad = not self._frozen

    @property
    def n_columns(self) -> int:
        return len(self.expert_ids)

    def param_count(self) -> int:
        return self.w_g.size

    def logits(self, x: Tensor) -> Tensor:
        return ops.matmul(x, self.w_g, stable_columns=True)

    def drop_experts(self, removed: set) -> None:
        """Delete the columns of removed experts."""
        keep = [j for j, e in enumerate(self.expert_ids) if e not in removed]
        if len(keep) == len(self.expert_ids):
            return
        if len(keep) < self.top_k:
            raise StructuralError(
                f"router {self.dataset_id}: removing experts leaves {len(keep)} < top_k={self.top_k}"
            )
        self.w_g = Tensor(self.w_g.data[:, keep], requires_grad=not self._frozen)
        self.expert_ids = tuple(self.expert_ids[j] for j in keep)

    def __repr__(self) -> str:
        return (
            f"Router(dataset_id={self.dataset_id}, experts={len(self.expert_ids)}, "
            f"top_k={self.top_k}, frozen={self.frozen})"
        )


@dataclass
class GateDecision:
    """
    Per-sample routing result.

    ``probs`` is the full softmax over the router's columns (pre-Top-K);
    ``selected`` holds the chosen expert ids, highest probability first;
    ``weights`` are the gate values renormalised over the selected set.
    """

    dataset_id: int
    expert_ids: Tuple[int, ...]
    logits: Tensor
    probs: Tensor
    columns: np.ndarray
    selected: np.ndarray
    weights: Tensor

    @property
    def top_k(self) -> int:
        return int(self.selected.shape[1])

    def histogram(self, pool_ids: Iterable[int]) -> list:
        """Number of samples selecting each expert of the pool, in pool order."""
        return [int((self.selected == e).any(axis=1).sum()) for e in pool_ids]


def gate(router: Router, x: Tensor) -> GateDecision:
    """
    Top-K softmax gating.

    Experts are ranked by logit (the same order as by probability); ties go to
    the lowest expert id. Gradients reach ``w_g`` through the softmax of the
    selected logits and, for the MI statistics, through ``probs``.
    """
    logits = router.logits(x)
    probs = ops.softmax(logits, axis=1)
    k = router.top_k
    columns = np.argsort(-logits.data, axis=1, kind="stable")[:, :k]
    rows = np.arange(x.shape[0])[:, None]
    weights = ops.softmax(ops.index(logits, (rows, columns)), axis=1)
    selected = np.asarray(router.expert_ids, dtype=np.int64)[columns]
    return GateDecision(
        dataset_id=router.dataset_id,
        expert_ids=router.expert_ids,
        logits=logits,
        probs=probs,
        columns=columns,
        selected=selected,
        weights=weights,
    )
