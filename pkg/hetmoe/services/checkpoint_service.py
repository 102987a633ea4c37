"""
Checkpoints as a single JSON document.

Arrays are nested lists of Python floats, written with their shortest
round-tripping repr, so load(save(model)) restores every bit.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from pydantic import ValidationError

from hetmoe.autograd.tensor import Tensor
from hetmoe.core.config import settings
from hetmoe.core.exceptions import ConfigError, MissingEntityError
from hetmoe.models.schemas import DatasetSpec, RunConfig
from hetmoe.moe.expert import Expert
from hetmoe.moe.router import Router
from hetmoe.network.layers import Linear
from hetmoe.network.model import HeterogeneousModel
from hetmoe.objectives.buffer import JointBuffer
from hetmoe.services.training_service import TrainState

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    config: RunConfig
    model: HeterogeneousModel
    state: Optional[TrainState] = None


def _linear_dict(linear: Linear) -> Dict[str, Any]:
    return {"w": linear.w.data.tolist(), "b": linear.b.data.tolist(), "frozen": linear.frozen}


def _linear_from(data: Dict[str, Any]) -> Linear:
    w = np.asarray(data["w"], dtype=np.float64)
    linear = Linear(w.shape[0], w.shape[1], w=w, b=np.asarray(data["b"], dtype=np.float64))
    linear.frozen = data["frozen"]
    return linear


def model_to_dict(model: HeterogeneousModel) -> Dict[str, Any]:
    blocks = []
    for block in model.blocks:
        moe = None
        if block.moe is not None:
            layer = block.moe
            moe = {
                "layer_id": layer.layer_id,
                "hidden": layer.hidden,
                "output_bias": layer.output_bias,
                "next_expert_id": layer.next_expert_id,
                "experts": [
                    {
                        "id": e.id,
                        "frozen": e.frozen,
                        **{name: t.data.tolist() for name, t in e.named_parameters()},
                    }
                    for e in layer.experts
                ],
                "routers": [
                    {
                        "dataset_id": r.dataset_id,
                        "top_k": r.top_k,
                        "n_experts_at_creation": r.n_experts_at_creation,
                        "expert_ids": list(r.expert_ids),
                        "frozen": r.frozen,
                        "w_g": r.w_g.data.tolist(),
                    }
                    for _, r in sorted(layer.routers.items())
                ],
                "buffer": layer.buffer.to_dict(),
            }
        blocks.append({"dense": _linear_dict(block.dense), "moe": moe})
    return {
        "seed": model.seed,
        "config": model.config.model_dump(mode="json"),
        "embed": _linear_dict(model.embed),
        "blocks": blocks,
        "heads": {str(k): _linear_dict(h) for k, h in sorted(model.heads.items())},
        "specs": {str(k): s.model_dump(mode="json") for k, s in sorted(model.specs.items())},
    }


def model_from_dict(data: Dict[str, Any], run_config: RunConfig) -> HeterogeneousModel:
    model = HeterogeneousModel(run_config.model, seed=int(data["seed"]))
    if len(data["blocks"]) != len(model.blocks):
        raise ConfigError(f"checkpoint has {len(data['blocks'])} blocks, config builds {len(model.blocks)}")
    model.embed = _linear_from(data["embed"])
    for block, stored in zip(model.blocks, data["blocks"]):
        block.dense = _linear_from(stored["dense"])
        moe = stored["moe"]
        if (moe is None) != (block.moe is None):
            raise ConfigError("checkpoint MoE placement does not match the model config")
        if moe is None:
            continue
        layer = block.moe
        layer.hidden = int(moe["hidden"])
        layer.output_bias = bool(moe["output_bias"])
        layer.next_expert_id = int(moe["next_expert_id"])
        layer.experts = []
        for e in moe["experts"]:
            expert = Expert.from_arrays(
                e["id"],
                np.asarray(e["w1"], dtype=np.float64),
                np.asarray(e["b1"], dtype=np.float64),
                np.asarray(e["w2"], dtype=np.float64),
                np.asarray(e["b2"], dtype=np.float64) if "b2" in e else None,
            )
            expert.frozen = e["frozen"]
            layer.experts.append(expert)
        layer.routers = {}
        for r in moe["routers"]:
            router = Router(
                r["dataset_id"],
                Tensor(np.asarray(r["w_g"], dtype=np.float64).reshape(layer.d, len(r["expert_ids"])),
                       requires_grad=True),
                r["expert_ids"],
                r["top_k"],
                r["n_experts_at_creation"],
            )
            router.frozen = r["frozen"]
            layer.routers[router.dataset_id] = router
        layer.buffer = JointBuffer.from_dict(moe["buffer"])
    model.heads = {int(k): _linear_from(h) for k, h in data["heads"].items()}
    model.specs = {int(k): DatasetSpec.model_validate(s) for k, s in data["specs"].items()}
    return model


def checkpoint_bytes(
    model: HeterogeneousModel,
    config: RunConfig,
    state: Optional[TrainState] = None,
) -> bytes:
    document = {
        "version": settings.CHECKPOINT_VERSION,
        "config": config.model_dump(mode="json"),
        "model": model_to_dict(model),
        "train_state": state.to_dict() if state is not None else None,
    }
    try:
        text = json.dumps(document, sort_keys=True, separators=(",", ":"), allow_nan=False)
    except ValueError as e:
        logger.error(f"Error serialising checkpoint: {e}")
        raise ConfigError(f"checkpoint contains non-finite values: {e}") from e
    return text.encode("utf-8")


def save_checkpoint(
    path: PathLike,
    model: HeterogeneousModel,
    config: RunConfig,
    state: Optional[TrainState] = None,
) -> str:
    """
    Write the checkpoint and return its sha256 digest.

    Same model, config and state always produce the same bytes.
    """
    data = checkpoint_bytes(model, config, state)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    logger.info(f"saved checkpoint {path} ({len(data)} bytes, sha256 {digest[:12]})")
    return digest


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise MissingEntityError(f"checkpoint not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        logger.error(f"Error reading checkpoint {path}: {e}")
        raise ConfigError(f"unreadable checkpoint {path}: {e}") from e

    version = document.get("version")
    if version != settings.CHECKPOINT_VERSION:
        raise ConfigError(f"checkpoint version {version} is not supported")
    try:
        config = RunConfig.model_validate(document["config"])
    except (KeyError, ValidationError) as e:
        raise ConfigError(f"checkpoint {path} has an invalid config: {e}") from e

    model = model_from_dict(document["model"], config)
    state = None
    if document.get("train_state") is not None:
        state = TrainState.from_dict(document["train_state"], config.train)
    logger.info(f"loaded checkpoint {path}: {model}")
    return Checkpoint(config=config, model=model, state=state)


def checkpoint_digest(path: PathLike) -> str:
    path = Path(path)
    if not path.is_file():
        raise MissingEntityError(f"checkpoint not found: {path}")
    return hashlib.sha256(path.read_bytes()).hexdigest()
