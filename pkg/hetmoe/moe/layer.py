"""
The MoE layer: an expert pool, one router per dataset and a joint-usage buffer.
"""
from __future__ import annotations

import logging
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from hetmoe.autograd import ops
from hetmoe.autograd.tensor import Tensor
from hetmoe.core.config import settings
from hetmoe.core.exceptions import ConfigError, RoutingError, ShapeError, StructuralError
from hetmoe.moe.expert import Expert
from hetmoe.moe.router import GateDecision, Router, gate
from hetmoe.objectives.buffer import JointBuffer

logger = logging.getLogger(__name__)

# Keys for the seeded initialisation streams.
_EXPERT_STREAM = 0
_ROUTER_STREAM = 1


class MoELayer:
    """
    A pool of experts shared by every dataset, gated by dataset-specific routers.

    Expert ids are stable and never reused: removal keeps the ids of survivors
    and expansion always issues fresh ids.
    """

    def __init__(
        self,
        layer_id: int,
        d: int,
        hidden: int,
        n_experts: int,
        init_seed: int,
        output_bias: bool = True,
        momentum: float | None = None,
    ):
        self.layer_id = layer_id
        self.d = d
        self.hidden = hidden
        self.output_bias = output_bias
        self.experts: List[Expert] = []
        self.routers: Dict[int, Router] = {}
        self.buffer = JointBuffer(momentum=settings.BUFFER_MOMENTUM if momentum is None else momentum)
        self.next_expert_id = 0
        self.evaluation_count = 0
        self.add_experts(n_experts, init_seed)

    @property
    def expert_ids(self) -> Tuple[int, ...]:
        return tuple(e.id for e in self.experts)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def expert(self, expert_id: int) -> Expert:
        for e in self.experts:
            if e.id == expert_id:
                return e
        raise StructuralError(f"layer {self.layer_id}: unknown expert id {expert_id}")

    def router(self, dataset_id: int) -> Router:
        try:
            return self.routers[dataset_id]
        except KeyError:
            raise RoutingError(f"layer {self.layer_id}: no router for dataset {dataset_id}") from None

    def add_experts(self, count: int, init_seed: int) -> List[int]:
        """Append ``count`` freshly initialised experts; existing routers are untouched."""
        if count < 1:
            raise ConfigError(f"add_experts needs count >= 1, got {count}")
        new_ids = []
        for _ in range(count):
            expert_id = self.next_expert_id
            self.next_expert_id += 1
            rng = np.random.default_rng([init_seed, _EXPERT_STREAM, self.layer_id, expert_id])
            self.experts.append(Expert(expert_id, self.d, self.hidden, rng, output_bias=self.output_bias))
            new_ids.append(expert_id)
        self.buffer.add_experts(new_ids)
        logger.debug(f"layer {self.layer_id}: added experts {new_ids}")
        return new_ids

    def add_router(self, dataset_id: int, top_k: int, init_seed: int) -> Router:
        """Create a router for ``dataset_id`` over the current pool and a buffer row for it."""
        if dataset_id in self.routers:
            raise StructuralError(f"layer {self.layer_id}: dataset {dataset_id} already has a router")
        rng = np.random.default_rng([init_seed, _ROUTER_STREAM, self.layer_id, dataset_id])
        router = Router.create(dataset_id, self.d, self.expert_ids, top_k, rng)
        self.routers[dataset_id] = router
        if dataset_id not in self.buffer.dataset_ids:
            self.buffer.add_dataset(dataset_id)
        return router

    def replace_router(self, dataset_id: int, top_k: int, init_seed: int) -> Router:
        """Swap the router of ``dataset_id`` for a fresh one and forget its usage row."""
        self.router(dataset_id)
        del self.routers[dataset_id]
        router = self.add_router(dataset_id, top_k, init_seed)
        self.buffer.reset_row(dataset_id)
        return router

    def check_removal(self, ids: Iterable[int]) -> set:
        """Ids to remove, validated against the pool and every router's top_k."""
        removed = set(int(i) for i in ids)
        unknown = removed - set(self.expert_ids)
        if unknown:
            raise StructuralError(f"layer {self.layer_id}: unknown expert ids {sorted(unknown)}")
        for router in self.routers.values():
            left = sum(1 for e in router.expert_ids if e not in removed)
            if left < router.top_k:
                raise StructuralError(
                    f"layer {self.layer_id}: removing {sorted(removed)} leaves router "
                    f"{router.dataset_id} with {left} experts < top_k={router.top_k}"
                )
        return removed

    def remove_experts(self, ids: Iterable[int]) -> "MoELayer":
        """
        Delete experts by id, along with their router and buffer columns.

        Raises StructuralError, leaving the layer unchanged, if any router
        would keep fewer experts than its top_k.
        """
        removed = self.check_removal(ids)
        if not removed:
            return self
        self.experts = [e for e in self.experts if e.id not in removed]
        for router in self.routers.values():
            router.drop_experts(removed)
        self.buffer.remove_experts(removed)
        logger.info(f"layer {self.layer_id}: removed {len(removed)} experts, {self.n_experts} remain")
        return self

    def set_frozen(
        self,
        flag: bool,
        expert_ids: Optional[Iterable[int]] = None,
        router_ids: Optional[Iterable[int]] = None,
    ) -> None:
        """Freeze or unfreeze experts and routers; with no ids, the whole layer."""
        if expert_ids is None and router_ids is None:
            expert_ids, router_ids = self.expert_ids, list(self.routers)
        for expert_id in expert_ids or ():
            self.expert(expert_id).frozen = flag
        for dataset_id in router_ids or ():
            if dataset_id not in self.routers:
                raise StructuralError(f"layer {self.layer_id}: unknown router for dataset {dataset_id}")
            self.routers[dataset_id].frozen = flag

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        params = []
        for expert in self.experts:
            for name, tensor in expert.named_parameters():
                params.append((f"moe{self.layer_id}.expert{expert.id}.{name}", tensor))
        for dataset_id in sorted(self.routers):
            params.append((f"moe{self.layer_id}.router{dataset_id}.w_g", self.routers[dataset_id].w_g))
        return params

    def __repr__(self) -> str:
        return (
            f"MoELayer(layer_id={self.layer_id}, experts={self.n_experts}, "
            f"routers={sorted(self.routers)})"
        )


def route(layer: MoELayer, x: Tensor, dataset_id: int) -> GateDecision:
    """Top-K routing of ``x`` through the router of ``dataset_id``."""
    router = layer.router(dataset_id)
    if x.ndim != 2 or x.shape[1] != layer.d:
        raise ShapeError(f"layer {layer.layer_id}: expected input [batch x {layer.d}], got {x.shape}")
    return gate(router, x)


def moe_forward(
    layer: MoELayer,
    x: Tensor,
    dataset_id: int,
    decision: Optional[GateDecision] = None,
) -> Tensor:
    """
    Weighted sum of the selected experts' outputs per sample.

    Only selected experts are evaluated, each on the rows that chose it.
    Contributions are accumulated in pool order.
    """
    if decision is None:
        decision = route(layer, x, dataset_id)
    batch = x.shape[0]
    out: Optional[Tensor] = None
    for expert in layer.experts:
        hit = decision.selected == expert.id
        rows = np.nonzero(hit.any(axis=1))[0]
        if rows.size == 0:
            continue
        slots = hit[rows].argmax(axis=1)
        y = expert.forward(ops.index(x, rows))
        layer.evaluation_count += int(rows.size)
        w = ops.index(decision.weights, (rows, slots))
        part = ops.scatter_rows(ops.scale_rows(y, w), rows, batch)
        out = part if out is None else ops.add(out, part)
    if out is None:
        raise StructuralError(f"layer {layer.layer_id}: no expert was selected")
    return out
