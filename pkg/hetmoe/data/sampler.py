"""
Two-step heterogeneous sampling: pick a dataset by weight, then draw a batch from it.
"""
from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Sequence

import numpy as np

from hetmoe.autograd.tensor import Tensor
from hetmoe.core.config import settings
from hetmoe.core.exceptions import ConfigError
from hetmoe.data.synthetic import Batch, generate
from hetmoe.models.schemas import DatasetSpec, Split

logger = logging.getLogger(__name__)

# Keeps dataset choice draws apart from cursor shuffles.
_CHOICE_STREAM = 7


def sample_dataset(specs: Sequence[DatasetSpec], rng: np.random.Generator) -> int:
    """Draw a dataset id with probability w_sample_i / Σ w_sample."""
    if not specs:
        raise ConfigError("sample_dataset needs at least one dataset spec")
    weights = np.array([spec.w_sample for spec in specs], dtype=np.float64)
    if np.any(weights <= 0):
        raise ConfigError("sampling weights must be positive")
    cumulative = np.cumsum(weights / weights.sum())
    i = int(np.searchsorted(cumulative, rng.random(), side="right"))
    return specs[min(i, len(specs) - 1)].dataset_id


class BatchCursor:
    """
    Seeded shuffled-epoch cursor over one dataset split.

    The state is a single position counter: batch ``p`` is slice ``p mod E`` of
    the permutation for epoch ``p // E``, where E is the number of whole batches
    per epoch. Partial final batches are dropped.
    """

    def __init__(self, spec: DatasetSpec, seed: int, split: Split = Split.TRAIN, position: int = 0):
        self.spec = spec
        self.seed = seed
        self.split = Split(split)
        self.position = position
        self._data = generate(spec, self.split)
        self.batches_per_epoch = len(self._data) // spec.batch_size
        if self.batches_per_epoch < 1:
            raise ConfigError(
                f"dataset {spec.dataset_id}: batch_size {spec.batch_size} exceeds split size {len(self._data)}"
            )
        self._epoch: Optional[int] = None
        self._order: Optional[np.ndarray] = None

    def epoch_order(self, epoch: int) -> np.ndarray:
        if epoch != self._epoch:
            rng = np.random.default_rng([self.seed, self.spec.dataset_id, epoch])
            self._order = rng.permutation(len(self._data))
            self._epoch = epoch
        return self._order

    def next_batch(self) -> Batch:
        epoch, k = divmod(self.position, self.batches_per_epoch)
        b = self.spec.batch_size
        idx = self.epoch_order(epoch)[k * b:(k + 1) * b]
        self.position += 1
        return Batch(x=Tensor(self._data.x[idx]), y=self._data.y[idx], dataset_id=self.spec.dataset_id)


def next_batch(spec: DatasetSpec, cursor: BatchCursor) -> Batch:
    if cursor.spec.dataset_id != spec.dataset_id:
        raise ConfigError(f"cursor belongs to dataset {cursor.spec.dataset_id}, not {spec.dataset_id}")
    return cursor.next_batch()


@dataclass
class StreamItem:
    """A batch together with the stream state right after it was drawn."""
    iteration: int
    batch: Batch
    positions: Dict[int, int] = field(default_factory=dict)


class HeterogeneousStream:
    """
    Weighted dataset choice followed by a batch from that dataset's cursor.

    The choice at iteration t depends only on (seed, t), so a stream restored
    from ``iteration`` and the cursor positions continues identically.
    """

    def __init__(
        self,
        specs: Sequence[DatasetSpec],
        seed: int,
        iteration: int = 0,
        positions: Optional[Dict[int, int]] = None,
    ):
        if not specs:
            raise ConfigError("a heterogeneous stream needs at least one dataset")
        self.specs = list(specs)
        self.seed = seed
        self.iteration = iteration
        positions = positions or {}
        self.cursors = {
            spec.dataset_id: BatchCursor(spec, seed, Split.TRAIN, int(positions.get(spec.dataset_id, 0)))
            for spec in self.specs
        }

    def positions(self) -> Dict[int, int]:
        return {dataset_id: cursor.position for dataset_id, cursor in self.cursors.items()}

    def next(self) -> StreamItem:
        rng = np.random.default_rng([self.seed, _CHOICE_STREAM, self.iteration])
        dataset_id = sample_dataset(self.specs, rng)
        batch = self.cursors[dataset_id].next_batch()
        item = StreamItem(iteration=self.iteration, batch=batch, positions=self.positions())
        self.iteration += 1
        return item

    def __iter__(self) -> Iterator[StreamItem]:
        while True:
            yield self.next()


class BatchPrefetcher:
    """
    Runs a stream ahead of the consumer on one producer thread through a bounded queue.

    With depth 0 batches are produced synchronously. A single producer keeps the
    item order identical to the synchronous stream.
    """

    def __init__(self, stream: HeterogeneousStream, depth: Optional[int] = None):
        self.stream = stream
        self.depth = settings.THREADS if depth is None else int(depth)
        if self.depth < 0:
            raise ConfigError(f"prefetch depth must be >= 0, got {self.depth}")
        self._queue: Optional[queue.Queue] = None
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        if self.depth > 0:
            self._queue = queue.Queue(maxsize=self.depth)
            self._thread = threading.Thread(target=self._produce, name="hetmoe-prefetch", daemon=True)
            self._thread.start()
            logger.debug(f"batch prefetcher started with depth {self.depth}")

    def _produce(self) -> None:
        while not self._stop.is_set():
            try:
                item = self.stream.next()
            except Exception as e:
                item = e
            while not self._stop.is_set():
                try:
                    self._queue.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if isinstance(item, Exception):
                return

    def next(self) -> StreamItem:
        if self._queue is None:
            return self.stream.next()
        item = self._queue.get()
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=1.0)
            self._thread = None

    def __enter__(self) -> "BatchPrefetcher":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
