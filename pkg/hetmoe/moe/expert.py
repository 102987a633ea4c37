"""
Two-layer MLP experts.
"""
import logging
from typing import List, Optional, Tuple

import numpy as np

from hetmoe.autograd import ops
from hetmoe.autograd.tensor import Tensor

logger = logging.getLogger(__name__)


def uniform_init(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    """Symmetric uniform initialisation scaled by 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Expert:
    """
    One expert: ``w2ᵀ tanh(w1ᵀ x + b1) + b2``.

    The output bias is omitted for FLOPs-matched pools so that the parameters
    activated per sample stay constant across Top-K settings.
    """

    def __init__(
        self,
        expert_id: int,
        d: int,
        hidden: int,
        rng: np.random.Generator,
        output_bias: bool = True,
    ):
        self.id = expert_id
        self.d = d
        self.hidden = hidden
        self.w1 = Tensor(uniform_init(rng, d, (d, hidden)), requires_grad=True)
        self.b1 = Tensor(uniform_init(rng, d, (hidden,)), requires_grad=True)
        self.w2 = Tensor(uniform_init(rng, hidden, (hidden, d)), requires_grad=True)
        self.b2: Optional[Tensor] = (
            Tensor(uniform_init(rng, hidden, (d,)), requires_grad=True) if output_bias else None
        )
        self._frozen = False

    @classmethod
    def from_arrays(
        cls,
        expert_id: int,
        w1: np.ndarray,
        b1: np.ndarray,
        w2: np.ndarray,
        b2: Optional[np.ndarray] = None,
    ) -> "Expert":
        """Rebuild an expert from stored weights."""
        expert = cls.__new__(cls)
        expert.id = int(expert_id)
        expert.d, expert.hidden = (int(n) for n in np.shape(w1))
        expert.w1 = Tensor(w1, requires_grad=True)
        expert.b1 = Tensor(b1, requires_grad=True)
        expert.w2 = Tensor(w2, requires_grad=True)
        expert.b2 = Tensor(b2, requires_grad=True) if b2 is not None else None
        expert._frozen = False
        return expert

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, flag: bool) -> None:
        self._frozen = bool(flag)
        for _, tensor in self.named_parameters():
            tensor.requires_grad = not self._frozen

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        params = [("w1", self.w1), ("b1", self.b1), ("w2", self.w2)]
        if self.b2 is not None:
            params.append(("b2", self.b2))
        return params

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def forward(self, x: Tensor) -> Tensor:
        h = ops.tanh(ops.add(ops.matmul(x, self.w1), self.b1))
        out = ops.matmul(h, self.w2)
        if self.b2 is not None:
            out = ops.add(out, self.b2)
        return out

    def __repr__(self) -> str:
        return f"Expert(id={self.id}, d={self.d}, hidden={self.hidden}, frozen={self.frozen})"
