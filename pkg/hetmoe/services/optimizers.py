"""
First-order optimizers over named parameters.
"""
from __future__ import annotations

import logging
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from hetmoe.autograd.tensor import Tensor
from hetmoe.core.exceptions import ConfigError
from hetmoe.models.schemas import OptimizerKind, TrainConfig

logger = logging.getLogger(__name__)

NamedGrads = Sequence[Tuple[str, Tensor, np.ndarray]]


class Optimizer:
    """
    Per-parameter state keyed by parameter name.

    State whose shape no longer matches its parameter (after pruning or
    expansion) is dropped and restarted.
    """

    kind: OptimizerKind

    def __init__(self, weight_decay: float = 0.0):
        self.weight_decay = weight_decay
        self.state: Dict[str, Dict[str, np.ndarray]] = {}
        self.steps = 0

    def _slot(self, name: str, shape: Tuple[int, ...], keys: Sequence[str]) -> Dict[str, np.ndarray]:
        slot = self.state.get(name)
        if slot is None or any(slot[k].shape != shape for k in keys):
            slot = {k: np.zeros(shape, dtype=np.float64) for k in keys}
            self.state[name] = slot
        return slot

    def step(self, grads: NamedGrads, lr: float) -> None:
        self.steps += 1
        for name, param, grad in grads:
            param.data = self._update(name, param.data, grad, lr)

    def _update(self, name: str, p: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
        raise NotImplementedError

    def state_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "steps": self.steps,
            "slots": {name: {k: v.tolist() for k, v in slot.items()} for name, slot in sorted(self.state.items())},
        }

    def load_state_dict(self, data: Dict[str, Any]) -> None:
        if data["kind"] != self.kind.value:
            raise ConfigError(f"optimizer state is for '{data['kind']}', not '{self.kind.value}'")
        self.steps = int(data["steps"])
        self.state = {
            name: {k: np.asarray(v, dtype=np.float64) for k, v in slot.items()}
            for name, slot in data["slots"].items()
        }


class SGDMomentum(Optimizer):
    """v ← βv + g + λp;  p ← p − lr·v."""

    kind = OptimizerKind.SGD

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(weight_decay)
        self.momentum = momentum

    def _update(self, name: str, p: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
        slot = self._slot(name, p.shape, ("v",))
        if self.weight_decay:
            g = g + self.weight_decay * p
        slot["v"] = self.momentum * slot["v"] + g
        return p - lr * slot["v"]


class Adam(Optimizer):
    """Adam with bias correction and decoupled weight decay."""

    kind = OptimizerKind.ADAM

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(weight_decay)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def _update(self, name: str, p: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
        slot = self._slot(name, p.shape, ("m", "v", "t"))
        # Per-parameter step count so restarted slots get fresh bias correction.
        slot["t"] = slot["t"] + 1.0
        t = float(slot["t"].flat[0])
        slot["m"] = self.beta1 * slot["m"] + (1.0 - self.beta1) * g
        slot["v"] = self.beta2 * slot["v"] + (1.0 - self.beta2) * g * g
        m_hat = slot["m"] / (1.0 - self.beta1 ** t)
        v_hat = slot["v"] / (1.0 - self.beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + self.eps)
        if self.weight_decay:
            update = update + self.weight_decay * p
        return p - lr * update


def build_optimizer(cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == OptimizerKind.SGD:
        return SGDMomentum(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    if cfg.optimizer == OptimizerKind.ADAM:
        return Adam(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
    raise ConfigError(f"unknown optimizer '{cfg.optimizer}'")


def named_gradients(params: List[Tuple[str, Tensor]]) -> List[Tuple[str, Tensor, np.ndarray]]:
    """(name, tensor, grad) for parameters that received a gradient; zeros otherwise."""
    return [(name, t, t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params]
