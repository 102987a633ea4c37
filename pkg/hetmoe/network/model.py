"""
Shared residual backbone with MoE blocks and one head per dataset.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from hetmoe.autograd.tensor import Tensor
from hetmoe.core.config import settings
from hetmoe.core.exceptions import ConfigError, DispatchError, StructuralError
from hetmoe.data.synthetic import Batch
from hetmoe.models.schemas import DatasetSpec, ModelConfig
from hetmoe.moe.layer import MoELayer
from hetmoe.moe.router import GateDecision
from hetmoe.network.layers import Block, Linear

logger = logging.getLogger(__name__)

# Keys for the dense initialisation streams (0 and 1 are used by the MoE layers).
_DENSE_STREAM = 2
_HEAD_STREAM = 3


@dataclass
class ForwardResult:
    """Head output plus the routing decision of every MoE layer, in depth order."""
    output: Tensor
    decisions: List[GateDecision] = field(default_factory=list)


class HeterogeneousModel:
    """
    embed → blocks → dataset head.

    Block ``i`` carries an MoE layer when ``moe_every > 0`` and
    ``(i + 1) % moe_every == 0``; ``moe_every = 0`` builds a dense model.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.embed = Linear(config.d_in, config.d, np.random.default_rng([seed, _DENSE_STREAM, 0]))
        self.blocks: List[Block] = []
        n_moe = 0
        for i in range(config.n_blocks):
            dense = Linear(config.d, config.d, np.random.default_rng([seed, _DENSE_STREAM, i + 1]))
            moe = None
            if config.moe_every > 0 and (i + 1) % config.moe_every == 0:
                moe = MoELayer(
                    layer_id=n_moe,
                    d=config.d,
                    hidden=config.hidden,
                    n_experts=config.n_experts,
                    init_seed=seed,
                    output_bias=not config.flops_matched,
                )
                n_moe += 1
            self.blocks.append(Block(dense, moe))
        self.heads: Dict[int, Linear] = {}
        self.specs: Dict[int, DatasetSpec] = {}
        logger.debug(f"built model with {config.n_blocks} blocks, {n_moe} MoE layers")

    @property
    def moe_layers(self) -> List[MoELayer]:
        return [block.moe for block in self.blocks if block.moe is not None]

    @property
    def dataset_ids(self) -> List[int]:
        return sorted(self.heads)

    def top_k(self, dataset_id: int) -> int:
        """Top-K of the dataset's routers (the model default for dense models)."""
        for layer in self.moe_layers:
            return layer.router(dataset_id).top_k
        return self.config.top_k

    def register_dataset(self, spec: DatasetSpec, top_k_override: Optional[int] = None) -> None:
        """
        Create one router per MoE layer over the current pool, one head and a buffer row.

        Args:
            spec: The dataset to register
            top_k_override: Top-K for the new routers instead of the model default
        """
        if spec.dataset_id in self.heads:
            raise StructuralError(f"dataset {spec.dataset_id} is already registered")
        if spec.d != self.config.d_in:
            raise ConfigError(f"dataset {spec.dataset_id} has d={spec.d}, model expects {self.config.d_in}")
        top_k = self.config.top_k if top_k_override is None else int(top_k_override)
        if top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {top_k}")
        for layer in self.moe_layers:
            if top_k > layer.n_experts:
                raise StructuralError(
                    f"layer {layer.layer_id}: top_k={top_k} exceeds pool of {layer.n_experts} experts"
                )
        for layer in self.moe_layers:
            layer.add_router(spec.dataset_id, top_k, self.seed)
        rng = np.random.default_rng([self.seed, _HEAD_STREAM, spec.dataset_id])
        self.heads[spec.dataset_id] = Linear(self.config.d, spec.output_dim, rng)
        self.specs[spec.dataset_id] = spec
        logger.info(f"registered dataset {spec.dataset_id} ({spec.name or spec.generator.value}) with top_k={top_k}")

    def reset_routers(self, dataset_id: int, top_k: int) -> None:
        """Replace the dataset's routers with fresh ones at ``top_k``; its buffer rows restart."""
        self._require(dataset_id)
        for layer in self.moe_layers:
            if top_k > layer.n_experts:
                raise StructuralError(
                    f"layer {layer.layer_id}: top_k={top_k} exceeds pool of {layer.n_experts} experts"
                )
        for layer in self.moe_layers:
            layer.replace_router(dataset_id, top_k, self.seed)
        logger.info(f"dataset {dataset_id}: routers re-created with top_k={top_k}")

    def add_experts(self, count: int) -> List[List[int]]:
        """Grow every MoE layer by ``count`` experts; returns the new ids per layer."""
        return [layer.add_experts(count, self.seed) for layer in self.moe_layers]

    def remove_experts(self, per_layer: Sequence[Iterable[int]]) -> None:
        """Remove experts layer by layer; every layer is validated before any is changed."""
        layers = self.moe_layers
        if len(per_layer) != len(layers):
            raise StructuralError(f"expected removals for {len(layers)} layers, got {len(per_layer)}")
        checked = [layer.check_removal(ids) for layer, ids in zip(layers, per_layer)]
        for layer, ids in zip(layers, checked):
            layer.remove_experts(ids)

    def _require(self, dataset_id: int) -> Linear:
        try:
            return self.heads[dataset_id]
        except KeyError:
            raise DispatchError(f"unknown dataset id {dataset_id}") from None

    def forward_features(self, x: Tensor, dataset_id: int) -> ForwardResult:
        head = self._require(dataset_id)
        h = self.embed.forward(x)
        decisions = []
        for block in self.blocks:
            h, decision = block.forward(h, dataset_id)
            if decision is not None:
                decisions.append(decision)
        return ForwardResult(output=head.forward(h), decisions=decisions)

    def forward(self, batch: Batch) -> ForwardResult:
        return self.forward_features(batch.x, batch.dataset_id)

    def predict(self, x: np.ndarray, dataset_id: int, chunk: Optional[int] = None) -> np.ndarray:
        """Head outputs for raw features, evaluated in chunks outside any recording scope."""
        chunk = chunk or settings.EVAL_CHUNK
        outputs = [
            self.forward_features(Tensor(x[start:start + chunk]), dataset_id).output.data
            for start in range(0, x.shape[0], chunk)
        ]
        return np.concatenate(outputs, axis=0)

    def freeze_all(self) -> None:
        self._set_frozen(True)

    def unfreeze_all(self) -> None:
        self._set_frozen(False)

    def _set_frozen(self, flag: bool) -> None:
        self.embed.frozen = flag
        for block in self.blocks:
            block.dense.frozen = flag
            if block.moe is not None:
                block.moe.set_frozen(flag)
        for head in self.heads.values():
            head.frozen = flag

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        params = [(f"embed.{name}", t) for name, t in self.embed.named_parameters()]
        for i, block in enumerate(self.blocks):
            params.extend((f"block{i}.dense.{name}", t) for name, t in block.dense.named_parameters())
            if block.moe is not None:
                params.extend(block.moe.named_parameters())
        for dataset_id in sorted(self.heads):
            params.extend((f"head{dataset_id}.{name}", t) for name, t in self.heads[dataset_id].named_parameters())
        return params

    def trainable_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(name, t) for name, t in self.named_parameters() if t.requires_grad]

    def evaluation_count(self) -> int:
        return sum(layer.evaluation_count for layer in self.moe_layers)

    def __repr__(self) -> str:
        return (
            f"HeterogeneousModel(blocks={len(self.blocks)}, moe_layers={len(self.moe_layers)}, "
            f"datasets={self.dataset_ids})"
        )


def _router_params(model: HeterogeneousModel) -> int:
    return sum(r.param_count() for layer in model.moe_layers for r in layer.routers.values())


def _expert_params(model: HeterogeneousModel) -> int:
    return sum(e.param_count() for layer in model.moe_layers for e in layer.experts)


def _backbone_params(model: HeterogeneousModel) -> int:
    dense = model.embed.param_count() + sum(block.dense.param_count() for block in model.blocks)
    return dense + _expert_params(model)


def _head_params(model: HeterogeneousModel) -> int:
    return sum(head.param_count() for head in model.heads.values())


def _active_params(model: HeterogeneousModel, dataset_id: Optional[int]) -> int:
    total = 0
    for layer in model.moe_layers:
        if not layer.experts:
            continue
        k = layer.router(dataset_id).top_k if dataset_id is not None else model.config.top_k
        total += k * layer.experts[0].param_count()
    return total


_SELECTORS: Dict[str, Callable[[HeterogeneousModel], int]] = {
    "backbone": _backbone_params,
    "routers": _router_params,
    "experts": _expert_params,
    "heads": _head_params,
    "all": lambda m: _backbone_params(m) + _head_params(m) + _router_params(m),
    "trainable": lambda m: sum(t.size for _, t in m.trainable_parameters()),
}


def param_count(model: HeterogeneousModel, selector: str = "all", dataset_id: Optional[int] = None) -> int:
    """
    Exact parameter counts.

    ``backbone`` is embed, dense blocks and experts; ``all`` is backbone + heads +
    routers. ``active`` counts the expert parameters one sample activates across
    the MoE layers (Top-K of ``dataset_id``'s routers, or the model default).
    """
    if selector == "active":
        return _active_params(model, dataset_id)
    try:
        return _SELECTORS[selector](model)
    except KeyError:
        raise ConfigError(f"unknown parameter selector '{selector}'") from None
