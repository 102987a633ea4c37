"""
Pydantic models for run configuration, metrics and reports.
"""
from __future__ import annotations

from enum import Enum
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class StrictModel(BaseModel):
    """Base model that rejects unknown keys."""

    model_config = ConfigDict(extra="forbid")


class TaskKind(str, Enum):
    """Kinds of per-dataset task."""
    CLASSIFICATION = "classification"
    REGRESSION = "regression"


class GeneratorKind(str, Enum):
    """Synthetic dataset generators."""
    BLOBS = "blobs"
    RINGS = "rings"
    SINE_REGRESSION = "sine_regression"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class DatasetSpec(StrictModel):
    """A seeded synthetic task with its sampling weight, loss weight and batch size."""
    dataset_id: int = Field(..., ge=0)
    name: str = ""
    task_kind: TaskKind
    generator: GeneratorKind
    d: int = Field(default=16, ge=1, description="Input dimension")
    n_classes: int = Field(default=2, description="Class count for classification")
    out_dim: int = Field(default=1, ge=1, description="Target dimension for regression")
    noise: float = Field(default=0.5, ge=0.0)
    spread: float = Field(default=3.0, gt=0.0, description="Scale of blob centers")
    seed: int = Field(default=0, ge=0)
    rotate: bool = Field(default=False, description="Apply a seeded orthogonal rotation to features")
    shift: float = Field(default=0.0, description="Constant offset added to raw features")
    n_train: int = Field(default=8192, ge=1)
    n_test: int = Field(default=2048, ge=1)
    w_sample: float = Field(default=1.0, gt=0.0)
    w_loss: float = Field(default=1.0, gt=0.0)
    batch_size: int = Field(default=64, ge=1)

    @model_validator(mode="after")
    def check_generator(self) -> "DatasetSpec":
        classification = self.generator in (GeneratorKind.BLOBS, GeneratorKind.RINGS)
        if classification and self.task_kind != TaskKind.CLASSIFICATION:
            raise ValueError(f"generator {self.generator.value} produces a classification task")
        if not classification and self.task_kind != TaskKind.REGRESSION:
            raise ValueError(f"generator {self.generator.value} produces a regression task")
        if classification and self.n_classes < 2:
            raise ValueError("classification needs n_classes >= 2")
        if self.batch_size > self.n_train:
            raise ValueError("batch_size exceeds n_train")
        return self

    @property
    def output_dim(self) -> int:
        return self.n_classes if self.task_kind == TaskKind.CLASSIFICATION else self.out_dim


class ModelConfig(StrictModel):
    """Backbone width, depth and MoE configuration."""
    d_in: int = Field(default=16, ge=1)
    d: int = Field(default=64, ge=1)
    n_blocks: int = Field(default=4, ge=1)
    moe_every: int = Field(default=1, ge=0, description="MoE in every k-th block; 0 builds a dense model")
    n_experts: int = Field(default=12, ge=1)
    top_k: int = Field(default=4, ge=1)
    hidden_budget: int = Field(default=256, ge=1)
    expert_hidden: int = Field(default=64, ge=1, description="Expert width when not FLOPs-matched")
    flops_matched: bool = True

    @model_validator(mode="after")
    def check_experts(self) -> "ModelConfig":
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k ({self.top_k}) exceeds n_experts ({self.n_experts})")
        if self.flops_matched and self.hidden_budget % self.top_k != 0:
            raise ValueError(f"hidden_budget ({self.hidden_budget}) is not divisible by top_k ({self.top_k})")
        return self

    @property
    def hidden(self) -> int:
        return self.hidden_budget // self.top_k if self.flops_matched else self.expert_hidden


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class TrainConfig(StrictModel):
    """Heterogeneous training loop settings."""
    total_iters: int = Field(default=2000, ge=1)
    peak_lr: float = Field(default=3e-3, gt=0.0)
    warmup_frac: float = Field(default=0.1, ge=0.0, le=1.0)
    clip_norm: float = Field(default=0.1, gt=0.0)
    lambda_mi: float = Field(default=0.1, ge=0.0)
    optimizer: OptimizerKind = OptimizerKind.SGD
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    seed: int = Field(default=0, ge=0)
    log_every: int = Field(default=100, ge=1)


class AdaptMode(str, Enum):
    ROUTER_ONLY = "router_only"
    ROUTER_PLUS_EXPERTS = "router_plus_experts"
    PRUNE = "prune"
    TOPK_REDUCE = "topk_reduce"
    HYBRID = "hybrid"
    FULL_FINETUNE = "full_finetune"


class ExpertSelection(str, Enum):
    RANDOM = "random"
    MOST_USED = "most_used"
    LEAST_USED = "least_used"


class PruneKind(str, Enum):
    FRACTION = "fraction"
    THRESHOLD = "threshold"


class PrunePolicy(StrictModel):
    """Remove the lowest-frequency fraction of experts, or all below a frequency threshold."""
    kind: PruneKind
    value: float = Field(..., ge=0.0, lt=1.0)


class HybridRecipe(str, Enum):
    A = "A"
    B = "B"


class HybridStepKind(str, Enum):
    ROUTER_PLUS = "router_plus"
    PRUNE = "prune"
    TOPK_REDUCE = "topk_reduce"


class HybridStep(StrictModel):
    """One stage of a hybrid adaptation. Stages run in the order they are declared."""
    kind: HybridStepKind
    k_experts: int = Field(default=1, ge=0, description="Experts tuned per layer (router_plus)")
    prune: Optional[PrunePolicy] = None
    new_k: Optional[int] = Field(default=None, ge=1, description="Top-K of the re-created routers (topk_reduce)")

    @model_validator(mode="after")
    def check_kind(self) -> "HybridStep":
        if self.kind == HybridStepKind.PRUNE and self.prune is None:
            raise ValueError("prune step needs a 'prune' policy")
        if self.kind == HybridStepKind.TOPK_REDUCE and self.new_k is None:
            raise ValueError("topk_reduce step needs 'new_k'")
        return self


class AdaptBudget(StrictModel):
    """Fine-tuning budget for one adaptation."""
    iters: int = Field(default=500, ge=1)
    peak_lr: float = Field(default=3e-3, gt=0.0)
    warmup_frac: float = Field(default=0.1, ge=0.0, le=1.0)
    clip_norm: float = Field(default=0.1, gt=0.0)
    lambda_mi: float = Field(default=0.1, ge=0.0)
    optimizer: OptimizerKind = OptimizerKind.SGD
    weight_decay: float = Field(default=0.0, ge=0.0)
    probe_iters: int = Field(default=100, ge=0, description="Router-only steps before usage-based choices")
    seed: int = Field(default=0, ge=0)

    def train_config(self, iters: Optional[int] = None) -> TrainConfig:
        return TrainConfig(
            total_iters=iters if iters is not None else self.iters,
            peak_lr=self.peak_lr,
            warmup_frac=self.warmup_frac,
            clip_norm=self.clip_norm,
            lambda_mi=self.lambda_mi,
            optimizer=self.optimizer,
            weight_decay=self.weight_decay,
            seed=self.seed,
        )


class AdaptPlan(StrictModel):
    """One adaptation run against a pretrained checkpoint."""
    mode: AdaptMode
    dataset: Optional[DatasetSpec] = Field(default=None, description="New dataset to register")
    dataset_id: Optional[int] = Field(default=None, description="Registered target for prune / topk_reduce")
    k_experts: int = Field(default=1, ge=0)
    selection: ExpertSelection = ExpertSelection.RANDOM
    prune: Optional[PrunePolicy] = None
    new_k: Optional[int] = None
    recipe: Optional[HybridRecipe] = None
    steps: Optional[List[HybridStep]] = Field(default=None, description="Explicit hybrid stages, in order")
    budget: AdaptBudget = Field(default_factory=AdaptBudget)

    @model_validator(mode="after")
    def check_mode(self) -> "AdaptPlan":
        needs_new = {AdaptMode.ROUTER_ONLY, AdaptMode.ROUTER_PLUS_EXPERTS, AdaptMode.HYBRID, AdaptMode.FULL_FINETUNE}
        if self.mode in needs_new and self.dataset is None:
            raise ValueError(f"mode {self.mode.value} needs a 'dataset' spec")
        if self.mode in (AdaptMode.PRUNE, AdaptMode.TOPK_REDUCE) and self.dataset_id is None and self.dataset is None:
            raise ValueError(f"mode {self.mode.value} needs 'dataset_id' or 'dataset'")
        if self.mode == AdaptMode.PRUNE and self.prune is None:
            raise ValueError("mode prune needs a 'prune' policy")
        if self.mode == AdaptMode.TOPK_REDUCE and self.new_k is None:
            raise ValueError("mode topk_reduce needs 'new_k'")
        if self.mode == AdaptMode.HYBRID and (self.recipe is None) == (not self.steps):
            raise ValueError("mode hybrid needs exactly one of 'recipe' or 'steps'")
        return self


class ContinualTask(StrictModel):
    """One continual-learning step: a new dataset and the experts added for it."""
    dataset: DatasetSpec
    c_new_experts: int = Field(default=2, ge=0)


class ContinualPlan(StrictModel):
    tasks: List[ContinualTask] = Field(default_factory=list)
    budget: AdaptBudget = Field(default_factory=AdaptBudget)


def default_datasets() -> List[DatasetSpec]:
    """Desk-scale pretraining suite: blobs, rings and sine regression."""
    return [
        DatasetSpec(dataset_id=0, name="blobs", task_kind=TaskKind.CLASSIFICATION,
                    generator=GeneratorKind.BLOBS, d=16, n_classes=8, seed=11,
                    w_sample=3.0, w_loss=1.0, batch_size=64),
        DatasetSpec(dataset_id=1, name="rings", task_kind=TaskKind.CLASSIFICATION,
                    generator=GeneratorKind.RINGS, d=16, n_classes=4, noise=0.1, seed=12,
                    w_sample=2.0, w_loss=0.6, batch_size=64),
        DatasetSpec(dataset_id=2, name="sine", task_kind=TaskKind.REGRESSION,
                    generator=GeneratorKind.SINE_REGRESSION, d=16, out_dim=4, noise=0.05, seed=13,
                    w_sample=1.0, w_loss=0.2, batch_size=64),
    ]


def default_downstream() -> List[DatasetSpec]:
    """Held-out datasets for adaptation: rotated blobs and shifted rings."""
    return [
        DatasetSpec(dataset_id=10, name="rotated_blobs", task_kind=TaskKind.CLASSIFICATION,
                    generator=GeneratorKind.BLOBS, d=16, n_classes=8, seed=21, rotate=True,
                    batch_size=64),
        DatasetSpec(dataset_id=11, name="shifted_rings", task_kind=TaskKind.CLASSIFICATION,
                    generator=GeneratorKind.RINGS, d=16, n_classes=4, noise=0.1, seed=22, shift=0.5,
                    batch_size=64),
    ]


class RunConfig(StrictModel):
    """Top-level run configuration file."""
    version: Literal[1]
    model: ModelConfig = Field(default_factory=ModelConfig)
    datasets: List[DatasetSpec] = Field(default_factory=default_datasets)
    train: TrainConfig = Field(default_factory=TrainConfig)
    adapt: Optional[AdaptPlan] = None
    continual: Optional[ContinualPlan] = None

    @model_validator(mode="after")
    def check_datasets(self) -> "RunConfig":
        ids = [spec.dataset_id for spec in self.datasets]
        if len(ids) != len(set(ids)):
            raise ValueError(f"dataset ids must be unique, got {ids}")
        for spec in self.datasets:
            if spec.d != self.model.d_in:
                raise ValueError(f"dataset {spec.dataset_id} has d={spec.d} but model.d_in={self.model.d_in}")
        return self


class Metrics(BaseModel):
    """Evaluation of one dataset split."""
    dataset_id: int
    split: Split
    n_samples: int
    task_kind: TaskKind
    loss: float
    accuracy: Optional[float] = None
    mse: Optional[float] = None
    r2: Optional[float] = None
    usage: List[Dict[int, float]] = Field(default_factory=list, description="Per-layer expert usage frequency")
    gate_mean: List[Dict[int, float]] = Field(default_factory=list, description="Per-layer mean gate probability")
    expert_evals_per_sample: float = 0.0

    @property
    def score(self) -> float:
        """Higher is better: accuracy for classification, R² for regression."""
        return self.accuracy if self.task_kind == TaskKind.CLASSIFICATION else self.r2


class StepReport(BaseModel):
    """One training iteration, as written to the metrics file."""
    iter: int
    dataset_id: int
    task_loss: float
    mi_loss: float
    lr: float
    grad_norm: float
    clipped_norm: float
    usage: List[List[int]] = Field(default_factory=list, description="Per-layer expert selection histogram")


class AdaptReport(BaseModel):
    """Outcome of an adaptation or continual-learning step."""
    mode: str
    dataset_id: int
    trainable_params: int
    model_params: int
    model_params_before: int
    expert_evals_per_sample: float
    expert_evals_before: float
    metrics_before: Dict[int, Metrics] = Field(default_factory=dict)
    metrics_after: Dict[int, Metrics] = Field(default_factory=dict)
    per_layer_usage: List[Dict[int, float]] = Field(default_factory=list)
    removed_experts: List[List[int]] = Field(default_factory=list)
    tuned_experts: List[List[int]] = Field(default_factory=list)
    added_experts: List[List[int]] = Field(default_factory=list)
