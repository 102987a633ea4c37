"""
Heterogeneous training: weighted dataset sampling, task + buffered MI loss,
clipped updates of unfrozen parameters, then the usage-buffer update.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import polars as pl

from hetmoe.autograd import ops
from hetmoe.autograd.tensor import Tensor, record
from hetmoe.core.config import settings
from hetmoe.core.exceptions import ConfigError, NumericError
from hetmoe.data.sampler import BatchPrefetcher, HeterogeneousStream, StreamItem
from hetmoe.data.synthetic import generate
from hetmoe.models.schemas import DatasetSpec, Metrics, Split, StepReport, TaskKind, TrainConfig
from hetmoe.network.model import HeterogeneousModel
from hetmoe.objectives.buffer import buffer_update
from hetmoe.objectives.losses import task_loss
from hetmoe.objectives.mutual_info import batch_usage, mi_loss_surrogate, usage_mutual_information
from hetmoe.services.optimizers import Optimizer, build_optimizer, named_gradients

logger = logging.getLogger(__name__)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """
    Triangular schedule: linear ramp 0 → peak over the warmup, then linear decay to 0 at total_iters.
    """
    total = cfg.total_iters
    if not 0 <= iteration < total:
        raise ConfigError(f"iteration {iteration} outside schedule [0, {total})")
    warm = min(max(int(cfg.warmup_frac * total), 0), total - 1)
    if iteration < warm:
        return cfg.peak_lr * iteration / warm
    return cfg.peak_lr * (total - iteration) / (total - warm)


@dataclass
class TrainState:
    """Everything needed to continue training bit-identically besides the model."""

    optimizer: Optimizer
    seed: int
    iteration: int = 0
    positions: Dict[int, int] = field(default_factory=dict)
    _stream: Optional[HeterogeneousStream] = field(default=None, repr=False)

    @classmethod
    def start(cls, cfg: TrainConfig) -> "TrainState":
        return cls(optimizer=build_optimizer(cfg), seed=cfg.seed)

    def stream(self, specs: Sequence[DatasetSpec]) -> HeterogeneousStream:
        """The sampler positioned at this state, rebuilt if it has drifted."""
        ids = [spec.dataset_id for spec in specs]
        stale = (
            self._stream is None
            or self._stream.iteration != self.iteration
            or self._stream.positions() != {i: self.positions.get(i, 0) for i in ids}
        )
        if stale:
            self._stream = HeterogeneousStream(specs, self.seed, self.iteration, self.positions)
        return self._stream

    def advance(self, item: StreamItem) -> None:
        self.iteration = item.iteration + 1
        self.positions = dict(item.positions)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "iteration": self.iteration,
            "positions": {str(k): v for k, v in sorted(self.positions.items())},
            "optimizer": self.optimizer.state_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], cfg: TrainConfig) -> "TrainState":
        optimizer = build_optimizer(cfg)
        optimizer.load_state_dict(data["optimizer"])
        return cls(
            optimizer=optimizer,
            seed=int(data["seed"]),
            iteration=int(data["iteration"]),
            positions={int(k): int(v) for k, v in data["positions"].items()},
        )


def _check_finite(value: Tensor, what: str) -> None:
    if not np.all(np.isfinite(value.data)):
        raise NumericError(f"non-finite {what}")


def train_step(
    model: HeterogeneousModel,
    specs: Sequence[DatasetSpec],
    state: TrainState,
    cfg: TrainConfig,
    item: Optional[StreamItem] = None,
) -> StepReport:
    """
    One heterogeneous update.

    Args:
        model: Model with routers and heads for every spec
        specs: Datasets to sample from
        state: Iteration counter, sampler positions and optimizer moments
        cfg: Schedule, clipping and loss weights
        item: A pre-drawn batch (from a prefetcher); drawn from ``state`` when omitted

    Returns:
        StepReport: losses, learning rate, gradient norms and per-layer selection histograms
    """
    if item is None:
        item = state.stream(specs).next()
    batch = item.batch
    spec = next((s for s in specs if s.dataset_id == batch.dataset_id), None)
    if spec is None:
        raise ConfigError(f"batch from dataset {batch.dataset_id} has no spec in this run")
    lr = lr_at(item.iteration, cfg)

    params = model.named_parameters()
    for _, t in params:
        t.grad = None
    trainable = [(name, t) for name, t in params if t.requires_grad]

    layers = model.moe_layers
    with record() as tape:
        result = model.forward(batch)
        t_loss = task_loss(result.output, batch.y, spec.task_kind)
        _check_finite(t_loss, f"task loss on dataset {spec.dataset_id}")

        snapshots = []
        mi_total: Optional[Tensor] = None
        for layer, decision in zip(layers, result.decisions):
            snapshot = batch_usage(decision, spec.dataset_id, layer.buffer.n_datasets)
            layer.buffer.initialize_row(snapshot)
            mi = mi_loss_surrogate(snapshot, layer.buffer)
            _check_finite(mi, f"MI loss at MoE layer {layer.layer_id}")
            snapshots.append(snapshot)
            mi_total = mi if mi_total is None else ops.add(mi_total, mi)

        loss = ops.scale(t_loss, spec.w_loss)
        if mi_total is not None and cfg.lambda_mi > 0:
            loss = ops.add(loss, ops.scale(mi_total, cfg.lambda_mi))
    tape.backward(loss)

    grads = named_gradients(trainable)
    clipped, grad_norm = ops.clip_global_norm([g for _, _, g in grads], cfg.clip_norm)
    if not np.isfinite(grad_norm):
        raise NumericError(f"non-finite gradient norm at iteration {item.iteration}")
    state.optimizer.step([(name, t, g) for (name, t, _), g in zip(grads, clipped)], lr)

    # The loss has read the buffer; only now fold in this batch.
    for layer, snapshot in zip(layers, snapshots):
        buffer_update(layer.buffer, snapshot, spec.dataset_id)
    for _, t in params:
        t.grad = None

    state.advance(item)
    return StepReport(
        iter=item.iteration,
        dataset_id=spec.dataset_id,
        task_loss=t_loss.item(),
        mi_loss=mi_total.item() if mi_total is not None else 0.0,
        lr=lr,
        grad_norm=grad_norm,
        clipped_norm=ops.global_norm(clipped),
        usage=[d.histogram(layer.expert_ids) for layer, d in zip(layers, result.decisions)],
    )


def evaluate(model: HeterogeneousModel, spec: DatasetSpec, split: Split | str = Split.TEST) -> Metrics:
    """
    Task metrics plus per-layer expert-usage frequencies and mean gate probabilities.

    Runs outside any recording scope: parameters and buffers are not touched.
    """
    data = generate(spec, split)
    n = len(data)
    layers = model.moe_layers
    counts = [dict.fromkeys(layer.expert_ids, 0) for layer in layers]
    gate_sums = [dict.fromkeys(layer.router(spec.dataset_id).expert_ids, 0.0) for layer in layers]
    evals_before = model.evaluation_count()

    outputs = []
    chunk = settings.EVAL_CHUNK
    for start in range(0, n, chunk):
        result = model.forward_features(Tensor(data.x[start:start + chunk]), spec.dataset_id)
        outputs.append(result.output.data)
        for layer_counts, layer_gates, decision in zip(counts, gate_sums, result.decisions):
            ids, freq = np.unique(decision.selected, return_counts=True)
            for e, c in zip(ids, freq):
                layer_counts[int(e)] += int(c)
            for e, p in zip(decision.expert_ids, decision.probs.data.sum(axis=0)):
                layer_gates[e] += float(p)
    output = np.concatenate(outputs, axis=0)
    expert_evals = (model.evaluation_count() - evals_before) / n

    loss = task_loss(Tensor(output), data.y, spec.task_kind).item()
    metrics = Metrics(
        dataset_id=spec.dataset_id,
        split=Split(split),
        n_samples=n,
        task_kind=spec.task_kind,
        loss=loss,
        usage=[{e: c / n for e, c in layer_counts.items()} for layer_counts in counts],
        gate_mean=[{e: s / n for e, s in layer_gates.items()} for layer_gates in gate_sums],
        expert_evals_per_sample=expert_evals,
    )
    if spec.task_kind == TaskKind.CLASSIFICATION:
        metrics.accuracy = float(np.mean(output.argmax(axis=1) == data.y))
    else:
        residual = float(((output - data.y) ** 2).sum())
        total = float(((data.y - data.y.mean(axis=0)) ** 2).sum())
        metrics.mse = residual / data.y.size
        metrics.r2 = 1.0 - residual / total if total > 0 else 0.0
    return metrics


def layer_mutual_information(metrics: Iterable[Metrics]) -> List[float]:
    """Per-layer I(D; E) from the usage frequencies of several datasets, weighted equally."""
    metrics = list(metrics)
    if not metrics:
        return []
    values = []
    for layer in range(len(metrics[0].usage)):
        experts = sorted(set().union(*(m.usage[layer] for m in metrics)))
        rows = [[m.usage[layer].get(e, 0.0) for e in experts] for m in metrics]
        values.append(usage_mutual_information(rows))
    return values


class Trainer:
    """Runs ``train_step`` to the end of the schedule, streaming reports to an optional sink."""

    def __init__(
        self,
        model: HeterogeneousModel,
        specs: Sequence[DatasetSpec],
        cfg: TrainConfig,
        state: Optional[TrainState] = None,
        sink=None,
    ):
        if not specs:
            raise ConfigError("training needs at least one dataset")
        self.model = model
        self.specs = list(specs)
        self.cfg = cfg
        self.state = state or TrainState.start(cfg)
        self.sink = sink

    def run(self, iters: Optional[int] = None) -> List[StepReport]:
        """Train until ``total_iters`` (or for ``iters`` more steps, whichever comes first)."""
        end = self.cfg.total_iters
        if iters is not None:
            end = min(end, self.state.iteration + iters)
        reports: List[StepReport] = []
        if self.state.iteration >= end:
            return reports

        logger.info(
            f"training from iteration {self.state.iteration} to {end} on datasets "
            f"{[s.dataset_id for s in self.specs]}"
        )
        stream = HeterogeneousStream(self.specs, self.state.seed, self.state.iteration, self.state.positions)
        with BatchPrefetcher(stream) as prefetcher:
            while self.state.iteration < end:
                report = train_step(self.model, self.specs, self.state, self.cfg, prefetcher.next())
                reports.append(report)
                if self.sink is not None:
                    self.sink.write(report)
                if (report.iter + 1) % self.cfg.log_every == 0:
                    logger.info(
                        f"iter {report.iter + 1}/{self.cfg.total_iters} dataset {report.dataset_id} "
                        f"task {report.task_loss:.4f} mi {report.mi_loss:.4f} lr {report.lr:.2e}"
                    )
        return reports


def seed_study(run: Callable[[int], Dict[str, float]], seeds: Iterable[int]) -> pl.DataFrame:
    """Run one experiment arm per seed; one row per seed."""
    rows = []
    for seed in seeds:
        row = dict(run(seed))
        row["seed"] = seed
        rows.append(row)
        logger.info(f"seed {seed}: {row}")
    return pl.DataFrame(rows)
