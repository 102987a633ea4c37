"""
Dense building blocks of the backbone.
"""
from __future__ import annotations

import logging
from typing import List, Optional, Tuple

import numpy as np

from hetmoe.autograd import ops
from hetmoe.autograd.tensor import Tensor
from hetmoe.moe.expert import uniform_init
from hetmoe.moe.layer import MoELayer, moe_forward, route
from hetmoe.moe.router import GateDecision

logger = logging.getLogger(__name__)


class Linear:
    """Affine map ``x @ w + b``."""

    def __init__(self, d_in: int, d_out: int, rng: Optional[np.random.Generator] = None,
                 w: Optional[np.ndarray] = None, b: Optional[np.ndarray] = None):
        if w is None:
            w = uniform_init(rng, d_in, (d_in, d_out))
            b = uniform_init(rng, d_in, (d_out,))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)
        self._frozen = False

    @property
    def d_in(self) -> int:
        return self.w.shape[0]

    @property
    def d_out(self) -> int:
        return self.w.shape[1]

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, flag: bool) -> None:
        self._frozen = bool(flag)
        self.w.requires_grad = self.b.requires_grad = not self._frozen

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [("w", self.w), ("b", self.b)]

    def param_count(self) -> int:
        return self.w.size + self.b.size

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(ops.matmul(x, self.w), self.b)


class Block:
    """
    Residual block: ``x + moe(tanh(dense(x)))`` when it carries an MoE layer,
    ``x + tanh(dense(x))`` otherwise.
    """

    def __init__(self, dense: Linear, moe: Optional[MoELayer] = None):
        self.dense = dense
        self.moe = moe

    def forward(self, x: Tensor, dataset_id: int) -> Tuple[Tensor, Optional[GateDecision]]:
        h = ops.tanh(self.dense.forward(x))
        if self.moe is None:
            return ops.add(x, h), None
        decision = route(self.moe, h, dataset_id)
        return ops.add(x, moe_forward(self.moe, h, dataset_id, decision)), decision
