"""
Seeded synthetic heterogeneous datasets.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass
from typing import Union

import numpy as np

from hetmoe.autograd.tensor import Tensor
from hetmoe.core.exceptions import ConfigError
from hetmoe.models.schemas import DatasetSpec, GeneratorKind, Split, TaskKind

logger = logging.getLogger(__name__)

SINE_HIDDEN = 8

# Stream keys so generators never share draws.
_CONTENT_STREAM = 0
_ROTATION_STREAM = 1


@dataclass(frozen=True)
class SyntheticSplit:
    """Features and targets of one split."""
    x: np.ndarray
    y: np.ndarray
    dataset_id: int
    split: Split

    def __len__(self) -> int:
        return int(self.x.shape[0])


@dataclass
class Batch:
    """A training pair batch from one dataset."""
    x: Tensor
    y: np.ndarray
    dataset_id: int

    @property
    def size(self) -> int:
        return int(self.x.shape[0])


def _balanced_labels(rng: np.random.Generator, n: int, n_classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes).astype(np.int64)


def _blobs(spec: DatasetSpec, rng: np.random.Generator, n: int):
    centers = rng.standard_normal((spec.n_classes, spec.d)) * spec.spread + spec.shift
    labels = _balanced_labels(rng, n, spec.n_classes)
    x = centers[labels] + spec.noise * rng.standard_normal((n, spec.d))
    return x, labels


def _rings(spec: DatasetSpec, rng: np.random.Generator, n: int):
    labels = _balanced_labels(rng, n, spec.n_classes)
    directions = rng.standard_normal((n, spec.d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radius = labels + 1.0 + spec.shift + spec.noise * rng.standard_normal(n)
    return directions * radius[:, None], labels


def _sine_regression(spec: DatasetSpec, rng: np.random.Generator, n: int):
    a = rng.standard_normal((spec.d, SINE_HIDDEN)) * (2.0 / np.sqrt(spec.d))
    w = rng.standard_normal((SINE_HIDDEN, spec.out_dim)) / np.sqrt(SINE_HIDDEN)
    x = rng.standard_normal((n, spec.d)) + spec.shift
    y = np.sin(x @ a) @ w + spec.noise * rng.standard_normal((n, spec.out_dim))
    return x, y


_GENERATORS = {
    GeneratorKind.BLOBS: _blobs,
    GeneratorKind.RINGS: _rings,
    GeneratorKind.SINE_REGRESSION: _sine_regression,
}


def validate_spec(spec: DatasetSpec) -> None:
    if spec.d < 1:
        raise ConfigError(f"dataset {spec.dataset_id}: input dimension must be >= 1, got {spec.d}")
    if spec.task_kind == TaskKind.CLASSIFICATION and spec.n_classes < 2:
        raise ConfigError(f"dataset {spec.dataset_id}: needs at least 2 classes, got {spec.n_classes}")


@functools.lru_cache(maxsize=32)
def _generate_all(spec_json: str):
    spec = DatasetSpec.model_validate_json(spec_json)
    validate_spec(spec)
    n = spec.n_train + spec.n_test
    rng = np.random.default_rng([spec.seed, _CONTENT_STREAM])
    x, y = _GENERATORS[spec.generator](spec, rng, n)

    if spec.rotate:
        rot_rng = np.random.default_rng([spec.seed, _ROTATION_STREAM])
        q, r = np.linalg.qr(rot_rng.standard_normal((spec.d, spec.d)))
        x = x @ (q * np.sign(np.diag(r)))

    # Standardise with training statistics.
    mu = x[: spec.n_train].mean(axis=0)
    sigma = x[: spec.n_train].std(axis=0)
    x = (x - mu) / np.where(sigma > 1e-12, sigma, 1.0)

    x.setflags(write=False)
    y.setflags(write=False)
    logger.debug(f"generated dataset {spec.dataset_id} ({spec.generator.value}): {n} samples")
    return x, y


def generate(spec: DatasetSpec, split: Union[Split, str]) -> SyntheticSplit:
    """
    Samples of one split. Train is the first ``n_train`` indices, test the rest.

    Pure function of the spec: two calls yield bit-identical arrays.
    """
    split = Split(split)
    validate_spec(spec)
    x, y = _generate_all(spec.model_dump_json())
    if split == Split.TRAIN:
        part = slice(0, spec.n_train)
    else:
        part = slice(spec.n_train, spec.n_train + spec.n_test)
    return SyntheticSplit(x=x[part], y=y[part], dataset_id=spec.dataset_id, split=split)
