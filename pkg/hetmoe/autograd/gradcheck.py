"""
Central finite-difference gradient checking.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from hetmoe.autograd import ops
from hetmoe.autograd.tensor import Tensor, record
from hetmoe.core.config import settings

logger = logging.getLogger(__name__)

ScalarFn = Callable[[], Tensor]


@dataclass
class GradCheckResult:
    """Outcome of checking one op or model."""

    name: str
    points: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / denom


def analytic_gradients(fn: ScalarFn, inputs: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of ``fn()`` with respect to ``inputs`` via one recorded backward pass."""
    for t in inputs:
        t.grad = None
    with record() as tape:
        out = fn()
    tape.backward(out)
    return [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def numeric_gradient(fn: ScalarFn, tensor: Tensor, step: float | None = None) -> np.ndarray:
    """Central differences of ``fn()`` with respect to every entry of ``tensor``."""
    h = settings.GRADCHECK_STEP if step is None else step
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = fn().item()
        flat[i] = original - h
        f_minus = fn().item()
        flat[i] = original
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(tensor.shape)


def check_gradient(fn: ScalarFn, inputs: Sequence[Tensor], step: float | None = None) -> float:
    """Largest relative error between analytic and numeric gradients over ``inputs``."""
    analytic = analytic_gradients(fn, inputs)
    worst = 0.0
    for tensor, grad in zip(inputs, analytic):
        worst = max(worst, relative_error(grad, numeric_gradient(fn, tensor, step)))
    return worst


def _projection(rng: np.random.Generator, out_shape) -> Tensor:
    return Tensor(rng.standard_normal(out_shape))


def _op_cases(rng: np.random.Generator) -> Dict[str, Callable[[], tuple]]:
    """Each case builds fresh tracked inputs and a scalar function of them."""

    def leaf(*shape, low=None, high=None):
        if low is not None:
            return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    def projected(out_fn, *inputs):
        probe = out_fn()
        w = _projection(rng, probe.shape)
        return (lambda: ops.sum(ops.mul(out_fn(), w))), list(inputs)

    def matmul_case():
        a, b = leaf(3, 3), leaf(3, 3)
        return projected(lambda: ops.matmul(a, b), a, b)

    def matmul_stable_case():
        a, b = leaf(4, 3), leaf(3, 5)
        return projected(lambda: ops.matmul(a, b, stable_columns=True), a, b)

    def softmax_case():
        x = leaf(5)
        return projected(lambda: ops.softmax(x), x)

    def softmax_rows_case():
        x = leaf(3, 4)
        return projected(lambda: ops.softmax(x, axis=1), x)

    def add_bias_case():
        a, b = leaf(3, 4), leaf(4)
        return projected(lambda: ops.add(a, b), a, b)

    def sub_case():
        a, b = leaf(3, 2), leaf(3, 2)
        return projected(lambda: ops.sub(a, b), a, b)

    def mul_case():
        a, b = leaf(2, 3), leaf(2, 3)
        return projected(lambda: ops.mul(a, b), a, b)

    def scale_case():
        a = leaf(4)
        return projected(lambda: ops.scale(a, -1.7), a)

    def tanh_case():
        a = leaf(3, 3)
        return projected(lambda: ops.tanh(a), a)

    def log_case():
        a = leaf(4, low=0.5, high=2.0)
        return projected(lambda: ops.log(a), a)

    def sum_axis_case():
        a = leaf(3, 4)
        return projected(lambda: ops.sum(a, axis=0), a)

    def mean_axis_case():
        a = leaf(3, 4)
        return projected(lambda: ops.mean(a, axis=1), a)

    def mse_case():
        a = leaf(4, 2)
        target = Tensor(rng.standard_normal((4, 2)))
        return (lambda: ops.mse(a, target)), [a]

    def cross_entropy_case():
        a = leaf(4, 3)
        labels = rng.integers(0, 3, size=4)
        return (lambda: ops.cross_entropy(a, labels)), [a]

    def l2_norm_case():
        a = leaf(5)
        return (lambda: ops.l2_norm(a)), [a]

    def index_case():
        a = leaf(4, 5)
        rows = np.array([[0], [1], [3]])
        cols = np.array([[1, 4], [0, 2], [3, 3]])
        return projected(lambda: ops.index(a, (rows, cols)), a)

    def scatter_rows_case():
        a = leaf(2, 3)
        rows = np.array([3, 0])
        return projected(lambda: ops.scatter_rows(a, rows, 4), a)

    def scale_rows_case():
        a, w = leaf(3, 4), leaf(3)
        return projected(lambda: ops.scale_rows(a, w), a, w)

    return {
        "matmul": matmul_case,
        "matmul_stable_columns": matmul_stable_case,
        "softmax": softmax_case,
        "softmax_rows": softmax_rows_case,
        "add_bias_row": add_bias_case,
        "sub": sub_case,
        "mul": mul_case,
        "scale": scale_case,
        "tanh": tanh_case,
        "log": log_case,
        "sum_axis": sum_axis_case,
        "mean_axis": mean_axis_case,
        "mse": mse_case,
        "cross_entropy": cross_entropy_case,
        "l2_norm": l2_norm_case,
        "index": index_case,
        "scatter_rows": scatter_rows_case,
        "scale_rows": scale_rows_case,
    }


def _model_case(rng: np.random.Generator):
    """A 2-block, 3-expert model with task loss plus the surrogate MI loss."""
    from hetmoe.data.synthetic import Batch
    from hetmoe.models.schemas import DatasetSpec, ModelConfig
    from hetmoe.network.model import HeterogeneousModel
    from hetmoe.objectives.losses import task_loss
    from hetmoe.objectives.mutual_info import batch_usage, mi_loss_surrogate

    config = ModelConfig(
        d_in=4, d=5, n_blocks=2, moe_every=1, n_experts=3, top_k=2,
        hidden_budget=6, flops_matched=True,
    )
    seed = int(rng.integers(0, 2**31 - 1))
    model = HeterogeneousModel(config, seed=seed)
    specs = [
        DatasetSpec(dataset_id=0, task_kind="classification", generator="blobs", d=4, n_classes=3),
        DatasetSpec(dataset_id=1, task_kind="regression", generator="sine_regression", d=4, out_dim=2),
    ]
    for spec in specs:
        model.register_dataset(spec)

    batch = Batch(
        x=Tensor(rng.standard_normal((6, 4))),
        y=rng.integers(0, 3, size=6),
        dataset_id=0,
    )
    # Buffer rows hold a prior estimate so the surrogate has constants to read.
    other = Batch(x=Tensor(rng.standard_normal((6, 4))), y=rng.standard_normal((6, 2)), dataset_id=1)
    for b in (batch, other):
        result = model.forward(b)
        for layer, decision in zip(model.moe_layers, result.decisions):
            layer.buffer.initialize_row(batch_usage(decision, b.dataset_id, layer.buffer.n_datasets))

    def loss_fn() -> Tensor:
        result = model.forward(batch)
        loss = task_loss(result.output, batch.y, "classification")
        for layer, decision in zip(model.moe_layers, result.decisions):
            snapshot = batch_usage(decision, batch.dataset_id, layer.buffer.n_datasets)
            loss = ops.add(loss, ops.scale(mi_loss_surrogate(snapshot, layer.buffer), 0.5))
        return loss

    params = [p for _, p in model.trainable_parameters()]
    return loss_fn, params


def run_battery(seed: int = 0, points: int = 20, model_points: int = 20) -> List[GradCheckResult]:
    """Check every differentiable op and an end-to-end MoE model at random points."""
    tol = settings.GRADCHECK_TOL
    results: List[GradCheckResult] = []
    rng = np.random.default_rng([seed, 0])

    for name, make_case in _op_cases(rng).items():
        worst = 0.0
        for _ in range(points):
            fn, inputs = make_case()
            worst = max(worst, check_gradient(fn, inputs))
        results.append(GradCheckResult(name=name, points=points, max_rel_error=worst, tolerance=tol))
        logger.debug(f"gradcheck {name}: max relative error {worst:.3e}")

    worst = 0.0
    for _ in range(model_points):
        fn, inputs = _model_case(rng)
        worst = max(worst, check_gradient(fn, inputs))
    results.append(GradCheckResult(name="moe_model", points=model_points, max_rel_error=worst, tolerance=tol))
    logger.debug(f"gradcheck moe_model: max relative error {worst:.3e}")

    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"gradcheck failures: {', '.join(failed)}")
    else:
        logger.info(f"gradcheck passed for {len(results)} cases")
    return results
