"""
Dense float64 tensors and the define-by-run gradient tape.
"""
from __future__ import annotations

import contextlib
import contextvars
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from hetmoe.core.exceptions import ShapeError, TapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_current_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "hetmoe_current_tape", default=None
)


class Tensor:
    """
    A dense n-dimensional array of float64 values.

    Data is held as a C-contiguous numpy array (row-major flat storage with
    shape metadata). Tensors with ``requires_grad`` set take part in the
    active tape; their gradient lands in ``grad`` after ``Tape.backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        array = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if array.ndim == 0:
            array = array.reshape(())
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class Node:
    """One recorded operation: its output, its parents and the local backward rule."""

    op: str
    output: Tensor
    parents: Tuple[Tensor, ...]
    backward: BackwardFn


@dataclass
class Tape:
    """
    Append-only record of operations.

    Nodes are appended as ops execute, so append order is a topological order
    (parents always precede children). A tape may be replayed backward once;
    call ``reset`` before recording again.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def append(self, node: Node) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that has already run backward; call reset()")
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """
        Propagate d(loss)/d(x) to every tracked tensor reachable from ``loss``.

        Gradients accumulate additively into ``Tensor.grad``.
        """
        if self.consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        self.consumed = True

        if not loss.requires_grad:
            logger.debug("backward on a tensor with no tracked parents; nothing to do")
            return

        if seed is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss or an explicit seed, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        elif seed.shape != loss.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match loss shape {loss.shape}")

        _accumulate(loss, seed)
        for node in reversed(self.nodes):
            upstream = node.output.grad
            if upstream is None:
                continue
            parent_grads = node.backward(upstream)
            for parent, grad in zip(node.parents, parent_grads):
                if grad is None or not parent.requires_grad:
                    continue
                _accumulate(parent, grad)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if grad.shape != tensor.shape:
        raise ShapeError(
            f"gradient shape {grad.shape} does not match tensor shape {tensor.shape}"
        )
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        tensor.grad = tensor.grad + grad


@contextlib.contextmanager
def record(tape: Optional[Tape] = None) -> Iterator[Tape]:
    """Make ``tape`` (or a fresh one) the active tape for the enclosed block."""
    tape = tape if tape is not None else Tape()
    token = _current_tape.set(tape)
    try:
        yield tape
    finally:
        _current_tape.reset(token)


def current_tape() -> Optional[Tape]:
    return _current_tape.get()


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def make_output(
    op: str,
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: BackwardFn,
) -> Tensor:
    """Wrap an op result, recording it on the active tape when any parent is tracked."""
    tape = current_tape()
    tracked = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        node = Node(op=op, output=out, parents=tuple(parents), backward=backward)
        out._node = node
        tape.append(node)
    return out
