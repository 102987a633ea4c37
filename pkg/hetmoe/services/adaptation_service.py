"""
Efficient adaptation of a pretrained model and continual expansion.

Every procedure freezes everything, unfreezes the part it tunes, trains with
the ordinary heterogeneous step on the target dataset alone and reports the
parameter and compute accounting next to before/after metrics.
"""
from __future__ import annotations

import logging
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from hetmoe.core.exceptions import ConfigError, MissingEntityError, PlanError, StructuralError
from hetmoe.models.schemas import (
    AdaptBudget,
    AdaptMode,
    AdaptPlan,
    AdaptReport,
    ContinualPlan,
    DatasetSpec,
    ExpertSelection,
    HybridRecipe,
    HybridStep,
    HybridStepKind,
    Metrics,
    PruneKind,
    PrunePolicy,
    Split,
)
from hetmoe.network.model import HeterogeneousModel, param_count
from hetmoe.services.training_service import Trainer, evaluate

logger = logging.getLogger(__name__)

UsageFrequency = List[Dict[int, float]]

HYBRID_PRUNE = PrunePolicy(kind=PruneKind.FRACTION, value=2.0 / 3.0)

# Both recipes prune 2/3, then re-create the routers at a smaller Top-K, then pick experts to tune.
HYBRID_RECIPES = {
    HybridRecipe.A: [
        HybridStep(kind=HybridStepKind.PRUNE, prune=HYBRID_PRUNE),
        HybridStep(kind=HybridStepKind.TOPK_REDUCE, new_k=2),
        HybridStep(kind=HybridStepKind.ROUTER_PLUS, k_experts=1),
    ],
    HybridRecipe.B: [
        HybridStep(kind=HybridStepKind.PRUNE, prune=HYBRID_PRUNE),
        HybridStep(kind=HybridStepKind.TOPK_REDUCE, new_k=3),
        HybridStep(kind=HybridStepKind.ROUTER_PLUS, k_experts=2),
    ],
}

_SELECTION_STREAM = 5


def _spec(model: HeterogeneousModel, dataset_id: int) -> DatasetSpec:
    try:
        return model.specs[dataset_id]
    except KeyError:
        raise MissingEntityError(f"dataset {dataset_id} is not registered with the model") from None


def measure_usage(model: HeterogeneousModel, dataset_id: int, split: Split | str = Split.TRAIN) -> UsageFrequency:
    """
    Per MoE layer, the fraction of samples whose Top-K set contains each expert.

    Experts the dataset's routers cannot address report 0.
    """
    return evaluate(model, _spec(model, dataset_id), split).usage


def _evaluate_all(model: HeterogeneousModel, dataset_ids: Optional[Iterable[int]] = None) -> Dict[int, Metrics]:
    ids = model.dataset_ids if dataset_ids is None else list(dataset_ids)
    return {i: evaluate(model, model.specs[i], Split.TEST) for i in ids}


def _finetune(model: HeterogeneousModel, spec: DatasetSpec, budget: AdaptBudget, iters: Optional[int] = None):
    cfg = budget.train_config(iters)
    logger.info(
        f"fine-tuning {param_count(model, 'trainable')} parameters on dataset {spec.dataset_id} "
        f"for {cfg.total_iters} iterations"
    )
    return Trainer(model, [spec], cfg).run()


def _tune_only_routers(model: HeterogeneousModel, dataset_id: int) -> None:
    """Freeze everything except the dataset's routers and head."""
    model.freeze_all()
    for layer in model.moe_layers:
        layer.set_frozen(False, router_ids=[dataset_id])
    model.heads[dataset_id].frozen = False


def _rank(frequencies: Dict[int, float], candidates: Sequence[int], descending: bool) -> List[int]:
    """Candidates ordered by frequency; ties go to the lowest id."""
    sign = -1.0 if descending else 1.0
    return sorted(candidates, key=lambda e: (sign * frequencies.get(e, 0.0), e))


def select_experts(
    model: HeterogeneousModel,
    dataset_id: int,
    k: int,
    selection: ExpertSelection,
    seed: int,
    usage: Optional[UsageFrequency] = None,
) -> List[List[int]]:
    """
    ``k`` expert ids per MoE layer among those the dataset's routers address.

    Usage-based policies read ``usage`` (measured on the dataset when omitted).
    """
    selection = ExpertSelection(selection)
    if selection != ExpertSelection.RANDOM and usage is None:
        usage = measure_usage(model, dataset_id)
    chosen = []
    for i, layer in enumerate(model.moe_layers):
        candidates = list(layer.router(dataset_id).expert_ids)
        if k > len(candidates):
            raise PlanError(f"layer {layer.layer_id}: cannot tune {k} experts out of {len(candidates)}")
        if selection == ExpertSelection.RANDOM:
            rng = np.random.default_rng([seed, _SELECTION_STREAM, layer.layer_id])
            picked = rng.choice(len(candidates), size=k, replace=False)
            chosen.append(sorted(candidates[j] for j in picked))
        else:
            ranked = _rank(usage[i], candidates, descending=selection == ExpertSelection.MOST_USED)
            chosen.append(sorted(ranked[:k]))
    return chosen


def prune_plan(model: HeterogeneousModel, usage: UsageFrequency, policy: PrunePolicy) -> List[List[int]]:
    """
    Expert ids to remove per layer.

    fraction f removes the round(f·N) least-used experts of each layer (ties:
    lowest id first); threshold θ removes every expert used by fewer than θ of
    the samples.
    """
    removals = []
    for layer, freq in zip(model.moe_layers, usage):
        ids = list(layer.expert_ids)
        if policy.kind == PruneKind.FRACTION:
            n_remove = int(round(policy.value * len(ids)))
            removals.append(sorted(_rank(freq, ids, descending=False)[:n_remove]))
        else:
            removals.append(sorted(e for e in ids if freq.get(e, 0.0) < policy.value))
    return removals


def _apply_prune(model: HeterogeneousModel, removals: List[List[int]]) -> None:
    try:
        model.remove_experts(removals)
    except StructuralError as e:
        logger.error(f"inadmissible prune: {e}")
        raise PlanError(f"inadmissible prune: {e}") from e


def _evals_before(model: HeterogeneousModel, dataset_id: int, metrics: Dict[int, Metrics]) -> float:
    if dataset_id in metrics:
        return metrics[dataset_id].expert_evals_per_sample
    return float(model.config.top_k * len(model.moe_layers))


def _report(
    mode: AdaptMode | str,
    model: HeterogeneousModel,
    dataset_id: int,
    trainable: int,
    params_before: int,
    evals_before: float,
    metrics_before: Dict[int, Metrics],
    **lists,
) -> AdaptReport:
    mode = mode.value if isinstance(mode, AdaptMode) else mode
    metrics_after = _evaluate_all(model)
    target = metrics_after[dataset_id]
    report = AdaptReport(
        mode=mode,
        dataset_id=dataset_id,
        trainable_params=trainable,
        model_params=param_count(model, "all"),
        model_params_before=params_before,
        expert_evals_per_sample=target.expert_evals_per_sample,
        expert_evals_before=evals_before,
        metrics_before=metrics_before,
        metrics_after=metrics_after,
        per_layer_usage=target.usage,
        **lists,
    )
    logger.info(
        f"{mode} on dataset {dataset_id}: trainable {trainable}, params "
        f"{params_before} -> {report.model_params}, expert evals {evals_before:g} -> "
        f"{report.expert_evals_per_sample:g}, score {target.score:.4f}"
    )
    return report


def _adapt_new_dataset(
    model: HeterogeneousModel,
    spec: DatasetSpec,
    budget: AdaptBudget,
    mode: AdaptMode,
    k_experts: int = 0,
    selection: ExpertSelection = ExpertSelection.RANDOM,
    top_k: Optional[int] = None,
) -> AdaptReport:
    params_before = param_count(model, "all")
    metrics_before = _evaluate_all(model)
    evals_before = _evals_before(model, spec.dataset_id, metrics_before)

    model.register_dataset(spec, top_k)
    metrics_before[spec.dataset_id] = evaluate(model, spec, Split.TEST)
    _tune_only_routers(model, spec.dataset_id)

    tuned: List[List[int]] = []
    if k_experts > 0:
        selection = ExpertSelection(selection)
        if selection != ExpertSelection.RANDOM and budget.probe_iters > 0:
            _finetune(model, spec, budget, iters=budget.probe_iters)
        tuned = select_experts(model, spec.dataset_id, k_experts, selection, budget.seed)
        for layer, ids in zip(model.moe_layers, tuned):
            layer.set_frozen(False, expert_ids=ids)

    trainable = param_count(model, "trainable")
    _finetune(model, spec, budget)
    return _report(mode, model, spec.dataset_id, trainable, params_before, evals_before,
                   metrics_before, tuned_experts=tuned)


def adapt_router_only(model: HeterogeneousModel, new_spec: DatasetSpec, budget: AdaptBudget,
                      top_k: Optional[int] = None) -> AdaptReport:
    """Register the dataset and train only its new routers and head."""
    return _adapt_new_dataset(model, new_spec, budget, AdaptMode.ROUTER_ONLY, top_k=top_k)


def adapt_router_plus(
    model: HeterogeneousModel,
    new_spec: DatasetSpec,
    k_experts: int,
    selection: ExpertSelection,
    budget: AdaptBudget,
    top_k: Optional[int] = None,
) -> AdaptReport:
    """Router-only adaptation that additionally tunes ``k_experts`` experts per MoE layer."""
    if k_experts < 0:
        raise ConfigError(f"k_experts must be >= 0, got {k_experts}")
    for layer in model.moe_layers:
        if k_experts > layer.n_experts:
            raise PlanError(f"layer {layer.layer_id}: cannot tune {k_experts} of {layer.n_experts} experts")
    return _adapt_new_dataset(model, new_spec, budget, AdaptMode.ROUTER_PLUS_EXPERTS,
                              k_experts=k_experts, selection=selection, top_k=top_k)


def prune_then_finetune(model: HeterogeneousModel, dataset_id: int, policy: PrunePolicy,
                        budget: AdaptBudget) -> AdaptReport:
    """Remove rarely used experts, then fine-tune the whole remaining model on the target."""
    spec = _spec(model, dataset_id)
    params_before = param_count(model, "all")
    metrics_before = _evaluate_all(model)
    evals_before = _evals_before(model, dataset_id, metrics_before)

    removals = prune_plan(model, measure_usage(model, dataset_id), policy)
    _apply_prune(model, removals)
    model.unfreeze_all()

    trainable = param_count(model, "trainable")
    _finetune(model, spec, budget)
    return _report(AdaptMode.PRUNE, model, dataset_id, trainable, params_before, evals_before,
                   metrics_before, removed_experts=removals)


def topk_reduce(model: HeterogeneousModel, dataset_id: int, new_k: int, budget: AdaptBudget) -> AdaptReport:
    """Replace the dataset's routers with fresh ones at a smaller Top-K and train them with the head."""
    spec = _spec(model, dataset_id)
    if new_k < 1:
        raise ConfigError(f"new_k must be >= 1, got {new_k}")
    current = model.top_k(dataset_id)
    if new_k >= current:
        raise PlanError(f"new_k={new_k} must be below the current top_k={current} of dataset {dataset_id}")
    params_before = param_count(model, "all")
    metrics_before = _evaluate_all(model)
    evals_before = _evals_before(model, dataset_id, metrics_before)

    model.reset_routers(dataset_id, new_k)
    _tune_only_routers(model, dataset_id)
    trainable = param_count(model, "trainable")
    _finetune(model, spec, budget)
    return _report(AdaptMode.TOPK_REDUCE, model, dataset_id, trainable, params_before, evals_before,
                   metrics_before)


def _hybrid_steps(recipe: HybridRecipe | str | Sequence[HybridStep]) -> List[HybridStep]:
    if isinstance(recipe, (HybridRecipe, str)):
        return list(HYBRID_RECIPES[HybridRecipe(recipe)])
    return [HybridStep.model_validate(step) for step in recipe]


def _check_steps(model: HeterogeneousModel, steps: Sequence[HybridStep]) -> None:
    """
    Reject a hybrid sequence before the model is touched.

    Each stage may appear once and prune must come before topk_reduce. Fraction
    prunes are simulated per layer so that a later Top-K or expert count that
    cannot fit the survivors fails up front; after a threshold prune the
    survivor count is only known at run time.
    """
    kinds = [step.kind for step in steps]
    if len(set(kinds)) != len(kinds):
        raise PlanError(f"hybrid stages may appear once each, got {[k.value for k in kinds]}")
    if HybridStepKind.PRUNE in kinds and HybridStepKind.TOPK_REDUCE in kinds:
        if kinds.index(HybridStepKind.TOPK_REDUCE) < kinds.index(HybridStepKind.PRUNE):
            raise PlanError("hybrid: prune must precede topk_reduce")

    existing_k = [model.top_k(i) for i in model.dataset_ids]
    for layer in model.moe_layers:
        pool: Optional[int] = layer.n_experts
        new_k = model.config.top_k
        for step in steps:
            if step.kind == HybridStepKind.PRUNE:
                if step.prune.kind != PruneKind.FRACTION:
                    pool = None
                    continue
                pool -= int(round(step.prune.value * pool))
                needed = max(existing_k + [new_k])
                if pool < needed:
                    raise PlanError(f"layer {layer.layer_id}: prune leaves {pool} experts, routers need {needed}")
            elif pool is None:
                continue
            elif step.kind == HybridStepKind.TOPK_REDUCE:
                new_k = step.new_k
                if new_k > pool:
                    raise PlanError(f"layer {layer.layer_id}: top_k={new_k} exceeds {pool} surviving experts")
            elif step.k_experts > pool:
                raise PlanError(f"layer {layer.layer_id}: cannot tune {step.k_experts} of {pool} experts")


def hybrid(
    model: HeterogeneousModel,
    new_spec: DatasetSpec,
    recipe: HybridRecipe | str | Sequence[HybridStep],
    budget: AdaptBudget,
    selection: ExpertSelection = ExpertSelection.RANDOM,
) -> AdaptReport:
    """
    Combine router + experts, pruning and a smaller Top-K on a new dataset.

    The dataset is registered at the model's Top-K and its routers are trained
    alone for ``budget.probe_iters`` steps whenever a stage needs usage
    frequencies. Stages then run in declared order:

    - prune: remove experts by the new dataset's usage; fails if it would drop
      an expert already chosen for tuning
    - topk_reduce: re-create the new routers at ``new_k`` over the current pool
    - router_plus: choose ``k_experts`` per layer to tune with ``selection``

    Finally the new routers, head and chosen experts are fine-tuned.

    Args:
        recipe: "A", "B" or an explicit list of steps
    """
    steps = _hybrid_steps(recipe)
    _check_steps(model, steps)
    selection = ExpertSelection(selection)
    dataset_id = new_spec.dataset_id
    params_before = param_count(model, "all")
    metrics_before = _evaluate_all(model)
    evals_before = _evals_before(model, dataset_id, metrics_before)

    model.register_dataset(new_spec)
    metrics_before[dataset_id] = evaluate(model, new_spec, Split.TEST)
    _tune_only_routers(model, dataset_id)

    routers_trained = False

    def learned_usage() -> UsageFrequency:
        nonlocal routers_trained
        if not routers_trained and budget.probe_iters > 0:
            _finetune(model, new_spec, budget, iters=budget.probe_iters)
        routers_trained = True
        return measure_usage(model, dataset_id)

    removals: List[List[int]] = []
    tuned: List[List[int]] = []
    for step in steps:
        if step.kind == HybridStepKind.PRUNE:
            removals = prune_plan(model, learned_usage(), step.prune)
            lost = [sorted(set(ids) & set(gone)) for ids, gone in zip(tuned, removals)]
            if any(lost):
                logger.error(f"hybrid prune would remove experts chosen for tuning: {lost}")
                raise PlanError(f"prune would remove experts chosen for tuning: {lost}")
            _apply_prune(model, removals)
        elif step.kind == HybridStepKind.TOPK_REDUCE:
            try:
                model.reset_routers(dataset_id, step.new_k)
            except StructuralError as e:
                raise PlanError(f"inadmissible topk_reduce: {e}") from e
            _tune_only_routers(model, dataset_id)
            routers_trained = False
        else:
            usage = learned_usage() if selection != ExpertSelection.RANDOM else None
            tuned = select_experts(model, dataset_id, step.k_experts, selection, budget.seed, usage)

    _tune_only_routers(model, dataset_id)
    for layer, ids in zip(model.moe_layers, tuned):
        layer.set_frozen(False, expert_ids=ids)

    trainable = param_count(model, "trainable")
    _finetune(model, new_spec, budget)
    return _report(AdaptMode.HYBRID, model, dataset_id, trainable, params_before, evals_before,
                   metrics_before, removed_experts=removals, tuned_experts=tuned)


def full_finetune(model: HeterogeneousModel, new_spec: DatasetSpec, budget: AdaptBudget) -> AdaptReport:
    """Register the dataset and train every parameter on it."""
    params_before = param_count(model, "all")
    metrics_before = _evaluate_all(model)
    evals_before = _evals_before(model, new_spec.dataset_id, metrics_before)

    model.register_dataset(new_spec)
    metrics_before[new_spec.dataset_id] = evaluate(model, new_spec, Split.TEST)
    model.unfreeze_all()
    trainable = param_count(model, "trainable")
    _finetune(model, new_spec, budget)
    return _report(AdaptMode.FULL_FINETUNE, model, new_spec.dataset_id, trainable, params_before,
                   evals_before, metrics_before)


def continual_step(model: HeterogeneousModel, new_spec: DatasetSpec, c_new_experts: int,
                   budget: AdaptBudget) -> AdaptReport:
    """
    Add ``c_new_experts`` per MoE layer, register the dataset over the grown pool
    and train only the new experts, routers and head.

    Earlier routers have no column for the new experts, so every earlier
    dataset's outputs stay bit-identical.
    """
    if c_new_experts < 0:
        raise ConfigError(f"c_new_experts must be >= 0, got {c_new_experts}")
    params_before = param_count(model, "all")
    metrics_before = _evaluate_all(model)
    evals_before = _evals_before(model, new_spec.dataset_id, metrics_before)

    added = model.add_experts(c_new_experts) if c_new_experts > 0 else [[] for _ in model.moe_layers]
    model.register_dataset(new_spec)
    metrics_before[new_spec.dataset_id] = evaluate(model, new_spec, Split.TEST)
    _tune_only_routers(model, new_spec.dataset_id)
    for layer, ids in zip(model.moe_layers, added):
        if ids:
            layer.set_frozen(False, expert_ids=ids)

    trainable = param_count(model, "trainable")
    _finetune(model, new_spec, budget)
    return _report("continual", model, new_spec.dataset_id, trainable, params_before, evals_before, metrics_before,
                   added_experts=added)


def run_plan(model: HeterogeneousModel, plan: AdaptPlan) -> AdaptReport:
    """Execute one adaptation plan."""
    budget = plan.budget
    if plan.mode == AdaptMode.ROUTER_ONLY:
        return adapt_router_only(model, plan.dataset, budget, top_k=plan.new_k)
    if plan.mode == AdaptMode.ROUTER_PLUS_EXPERTS:
        return adapt_router_plus(model, plan.dataset, plan.k_experts, plan.selection, budget, top_k=plan.new_k)
    if plan.mode == AdaptMode.HYBRID:
        return hybrid(model, plan.dataset, plan.steps or plan.recipe, budget, plan.selection)
    if plan.mode == AdaptMode.FULL_FINETUNE:
        return full_finetune(model, plan.dataset, budget)

    target = plan.dataset_id if plan.dataset_id is not None else plan.dataset.dataset_id
    _spec(model, target)
    if plan.mode == AdaptMode.PRUNE:
        return prune_then_finetune(model, target, plan.prune, budget)
    if plan.mode == AdaptMode.TOPK_REDUCE:
        return topk_reduce(model, target, plan.new_k, budget)
    raise ConfigError(f"unknown adaptation mode '{plan.mode}'")


def run_continual(model: HeterogeneousModel, plan: ContinualPlan) -> List[AdaptReport]:
    """Apply continual steps in order; each task sees the pool grown by all before it."""
    reports = []
    for task in plan.tasks:
        reports.append(continual_step(model, task.dataset, task.c_new_experts, plan.budget))
    return reports
