"""
Test the adaptation procedures and continual expansion.
"""
import numpy as np
import pytest

from hetmoe.core.exceptions import ConfigError, MissingEntityError, PlanError
from hetmoe.models.schemas import (
    AdaptPlan,
    ContinualPlan,
    ContinualTask,
    DatasetSpec,
    ExpertSelection,
    HybridStep,
    PruneKind,
    PrunePolicy,
)
from hetmoe.network.model import param_count
from hetmoe.services.adaptation_service import (
    adapt_router_only,
    adapt_router_plus,
    continual_step,
    full_finetune,
    hybrid,
    measure_usage,
    prune_plan,
    prune_then_finetune,
    run_continual,
    run_plan,
    select_experts,
    topk_reduce,
)

# hidden = 8 // 2 and no output bias: 8*4 + 4 + 4*8
PER_EXPERT = 68
ROUTERS_PER_DATASET = 2 * 8 * 6
HEAD_4_CLASSES = 8 * 4 + 4


def _snapshot(model):
    return {name: t.data.copy() for name, t in model.named_parameters()}


def _unchanged(before, model, prefix):
    after = dict(model.named_parameters())
    for name, value in before.items():
        if name.startswith(prefix):
            np.testing.assert_array_equal(after[name].data, value, err_msg=name)


def _assert_old_metrics_identical(report, dataset_ids):
    for i in dataset_ids:
        assert report.metrics_after[i].loss == report.metrics_before[i].loss
        for after, before in zip(report.metrics_after[i].usage, report.metrics_before[i].usage):
            assert {e: after[e] for e in before} == before


def _spec(dataset_id, seed):
    return DatasetSpec(dataset_id=dataset_id, task_kind="classification", generator="blobs", d=4,
                       n_classes=4, seed=seed, rotate=True, n_train=256, n_test=128, batch_size=16)


def _usage(*layers):
    return [dict(enumerate(layer)) for layer in layers]


def test_router_only_trains_routers_and_head(pretrained, downstream_spec, budget):
    before = _snapshot(pretrained)
    params_before = param_count(pretrained, "all")
    report = adapt_router_only(pretrained, downstream_spec, budget)

    assert report.mode == "router_only"
    assert report.trainable_params == ROUTERS_PER_DATASET + HEAD_4_CLASSES
    assert report.model_params == params_before + ROUTERS_PER_DATASET + HEAD_4_CLASSES
    assert report.model_params_before == params_before
    assert report.expert_evals_per_sample == pytest.approx(4.0)
    assert 10 in report.metrics_before
    _unchanged(before, pretrained, "")
    _assert_old_metrics_identical(report, [0, 1, 2])


def test_router_only_with_smaller_top_k(pretrained, downstream_spec, budget):
    report = adapt_router_only(pretrained, downstream_spec, budget, top_k=1)
    assert pretrained.top_k(10) == 1
    assert report.expert_evals_per_sample == pytest.approx(2.0)


def test_router_plus_experts_tunes_k_experts_per_layer(pretrained, downstream_spec, budget):
    before = _snapshot(pretrained)
    report = adapt_router_plus(pretrained, downstream_spec, 1, ExpertSelection.RANDOM, budget)

    assert report.trainable_params == ROUTERS_PER_DATASET + HEAD_4_CLASSES + 2 * PER_EXPERT
    assert [len(ids) for ids in report.tuned_experts] == [1, 1]
    _unchanged(before, pretrained, "embed")
    _unchanged(before, pretrained, "block")
    for layer, ids in zip(pretrained.moe_layers, report.tuned_experts):
        for expert in layer.experts:
            if expert.id not in ids:
                prefix = f"moe{layer.layer_id}.expert{expert.id}."
                _unchanged(before, pretrained, prefix)


def test_router_plus_random_selection_is_seeded(pretrained):
    a = select_experts(pretrained, 0, 2, ExpertSelection.RANDOM, seed=3)
    b = select_experts(pretrained, 0, 2, ExpertSelection.RANDOM, seed=3)
    assert a == b
    assert all(len(set(ids)) == 2 for ids in a)


def test_router_plus_too_many_experts(pretrained, downstream_spec, budget):
    with pytest.raises(PlanError):
        adapt_router_plus(pretrained, downstream_spec, 7, ExpertSelection.RANDOM, budget)
    with pytest.raises(ConfigError):
        adapt_router_plus(pretrained, downstream_spec, -1, ExpertSelection.RANDOM, budget)


def test_usage_based_selection(build_model):
    model = build_model()
    usage = _usage([0.1, 0.5, 0.5, 0.0, 0.0, 0.0], [0.9, 0.0, 0.2, 0.2, 0.3, 0.4])
    assert select_experts(model, 0, 2, ExpertSelection.MOST_USED, 0, usage) == [[1, 2], [0, 5]]
    assert select_experts(model, 0, 2, ExpertSelection.LEAST_USED, 0, usage) == [[3, 4], [1, 2]]
    with pytest.raises(PlanError):
        select_experts(model, 0, 7, ExpertSelection.MOST_USED, 0, usage)


def test_prune_plan_policies(build_model):
    model = build_model()
    usage = _usage([0.1, 0.5, 0.5, 0.0, 0.0, 0.9], [0.9, 0.0, 0.2, 0.2, 0.3, 0.4])
    fraction = prune_plan(model, usage, PrunePolicy(kind=PruneKind.FRACTION, value=0.5))
    assert fraction == [[0, 3, 4], [1, 2, 3]]
    threshold = prune_plan(model, usage, PrunePolicy(kind=PruneKind.THRESHOLD, value=0.25))
    assert threshold == [[0, 3, 4], [1, 2, 3]]
    nothing = prune_plan(model, usage, PrunePolicy(kind=PruneKind.FRACTION, value=0.0))
    assert nothing == [[], []]


def test_measure_usage_counts_top_k_per_sample(pretrained):
    usage = measure_usage(pretrained, 1)
    assert len(usage) == 2
    assert all(sum(layer.values()) == pytest.approx(2.0) for layer in usage)
    with pytest.raises(MissingEntityError):
        measure_usage(pretrained, 42)


def test_pruning_never_selected_experts_is_bit_identical(build_model, specs):
    """With constant MoE inputs, dataset 0 only ever picks experts 0 and 1."""
    model = build_model()
    for block in model.blocks:
        block.dense.w.data[:] = 0.0
        block.dense.b.data[:] = 1.0
    for layer in model.moe_layers:
        w_g = layer.router(0).w_g.data
        w_g[:] = 0.0
        w_g[:, [0, 1]] = 1.0

    x = np.random.default_rng(0).standard_normal((64, 4))
    before = model.predict(x, 0)
    removals = prune_plan(model, measure_usage(model, 0), PrunePolicy(kind=PruneKind.THRESHOLD, value=0.01))
    assert removals == [[2, 3, 4, 5], [2, 3, 4, 5]]

    model.remove_experts(removals)
    np.testing.assert_array_equal(model.predict(x, 0), before)


def test_prune_then_finetune(pretrained, budget):
    params_before = param_count(pretrained, "all")
    report = prune_then_finetune(pretrained, 0, PrunePolicy(kind=PruneKind.FRACTION, value=0.5), budget)

    assert report.mode == "prune"
    assert [len(ids) for ids in report.removed_experts] == [3, 3]
    for layer, removed in zip(pretrained.moe_layers, report.removed_experts):
        assert layer.n_experts == 3
        assert not set(removed) & set(layer.expert_ids)
    assert report.model_params == param_count(pretrained, "all") < params_before
    assert report.trainable_params == report.model_params


def test_inadmissible_prune_leaves_model_unchanged(pretrained, budget):
    before = _snapshot(pretrained)
    with pytest.raises(PlanError):
        prune_then_finetune(pretrained, 0, PrunePolicy(kind=PruneKind.FRACTION, value=0.9), budget)
    assert all(layer.n_experts == 6 for layer in pretrained.moe_layers)
    _unchanged(before, pretrained, "")


def test_topk_reduce(pretrained, budget):
    before = _snapshot(pretrained)
    report = topk_reduce(pretrained, 0, 1, budget)

    assert pretrained.top_k(0) == 1
    assert report.expert_evals_before == pytest.approx(4.0)
    assert report.expert_evals_per_sample == pytest.approx(2.0)
    assert report.trainable_params == ROUTERS_PER_DATASET + HEAD_4_CLASSES
    assert report.model_params == report.model_params_before
    _unchanged(before, pretrained, "moe0.expert")
    _unchanged(before, pretrained, "head1")
    _assert_old_metrics_identical(report, [1, 2])


def test_topk_reduce_rejects_bad_k(pretrained, budget):
    with pytest.raises(PlanError):
        topk_reduce(pretrained, 0, 2, budget)
    with pytest.raises(ConfigError):
        topk_reduce(pretrained, 0, 0, budget)
    with pytest.raises(MissingEntityError):
        topk_reduce(pretrained, 42, 1, budget)


def test_hybrid_recipe_a(pretrained, downstream_spec, budget):
    report = hybrid(pretrained, downstream_spec, "A", budget)

    assert report.mode == "hybrid"
    assert pretrained.top_k(10) == 2
    assert [len(ids) for ids in report.removed_experts] == [4, 4]
    assert [len(ids) for ids in report.tuned_experts] == [1, 1]
    assert all(layer.n_experts == 2 for layer in pretrained.moe_layers)
    assert report.model_params < report.model_params_before
    assert report.trainable_params == 2 * 8 * 2 + HEAD_4_CLASSES + 2 * PER_EXPERT


def test_hybrid_recipe_b_needs_more_survivors(pretrained, downstream_spec, budget):
    """Pruning 2/3 of six experts leaves two, too few for Top-3; nothing is touched."""
    with pytest.raises(PlanError):
        hybrid(pretrained, downstream_spec, "B", budget)
    assert 10 not in pretrained.dataset_ids
    assert all(layer.n_experts == 6 for layer in pretrained.moe_layers)


def test_hybrid_custom_steps_run_in_declared_order(pretrained, downstream_spec, budget):
    """Experts chosen before the prune are measured on the full pool and must survive it."""
    steps = [
        HybridStep(kind="router_plus", k_experts=1),
        HybridStep(kind="prune", prune=PrunePolicy(kind="fraction", value=0.5)),
    ]
    report = hybrid(pretrained, downstream_spec, steps, budget, "most_used")

    assert [len(ids) for ids in report.removed_experts] == [3, 3]
    assert [len(ids) for ids in report.tuned_experts] == [1, 1]
    for layer, tuned, removed in zip(pretrained.moe_layers, report.tuned_experts, report.removed_experts):
        assert set(tuned) <= set(layer.expert_ids)
        assert not set(tuned) & set(removed)
    assert pretrained.top_k(10) == 2
    assert report.trainable_params == 2 * 8 * 3 + HEAD_4_CLASSES + 2 * PER_EXPERT


def test_hybrid_rejects_topk_reduce_before_prune(pretrained, downstream_spec, budget):
    steps = [
        HybridStep(kind="topk_reduce", new_k=1),
        HybridStep(kind="prune", prune=PrunePolicy(kind="fraction", value=0.5)),
    ]
    with pytest.raises(PlanError):
        hybrid(pretrained, downstream_spec, steps, budget)
    assert 10 not in pretrained.dataset_ids
    assert all(layer.n_experts == 6 for layer in pretrained.moe_layers)


def test_hybrid_rejects_repeated_stage(pretrained, downstream_spec, budget):
    steps = [HybridStep(kind="router_plus", k_experts=1), HybridStep(kind="router_plus", k_experts=2)]
    with pytest.raises(PlanError):
        hybrid(pretrained, downstream_spec, steps, budget)


def test_hybrid_prune_cannot_drop_a_chosen_expert(pretrained, downstream_spec, budget):
    """The least-used expert is chosen first, so the later prune would remove it."""
    steps = [
        HybridStep(kind="router_plus", k_experts=1),
        HybridStep(kind="prune", prune=PrunePolicy(kind="fraction", value=0.5)),
    ]
    with pytest.raises(PlanError):
        hybrid(pretrained, downstream_spec, steps, budget, "least_used")
    assert all(layer.n_experts == 6 for layer in pretrained.moe_layers)


def test_hybrid_steps_through_run_plan(pretrained, downstream_spec, budget):
    plan = AdaptPlan(
        mode="hybrid",
        dataset=downstream_spec,
        steps=[{"kind": "prune", "prune": {"kind": "fraction", "value": 0.5}},
               {"kind": "topk_reduce", "new_k": 1}],
        budget=budget,
    )
    report = run_plan(pretrained, plan)
    assert report.mode == "hybrid"
    assert pretrained.top_k(10) == 1
    assert report.tuned_experts == []
    assert report.trainable_params == 2 * 8 * 3 + HEAD_4_CLASSES
    assert report.expert_evals_per_sample == 2


def test_full_finetune_trains_everything(pretrained, downstream_spec, budget):
    report = full_finetune(pretrained, downstream_spec, budget)
    assert report.trainable_params == param_count(pretrained, "all")
    assert report.mode == "full_finetune"


def test_continual_step_does_not_forget(pretrained, downstream_spec, budget):
    before = _snapshot(pretrained)
    report = continual_step(pretrained, downstream_spec, 2, budget)

    assert report.mode == "continual"
    assert report.added_experts == [[6, 7], [6, 7]]
    assert report.trainable_params == 2 * 2 * PER_EXPERT + 2 * 8 * 8 + HEAD_4_CLASSES
    assert all(layer.router(0).expert_ids == (0, 1, 2, 3, 4, 5) for layer in pretrained.moe_layers)
    _unchanged(before, pretrained, "")
    _assert_old_metrics_identical(report, [0, 1, 2])


def test_continual_without_new_experts(pretrained, downstream_spec, budget):
    report = continual_step(pretrained, downstream_spec, 0, budget)
    assert report.added_experts == [[], []]
    assert report.trainable_params == ROUTERS_PER_DATASET + HEAD_4_CLASSES


def test_run_continual_keeps_every_earlier_task(pretrained, budget):
    plan = ContinualPlan(
        tasks=[ContinualTask(dataset=_spec(10, 21), c_new_experts=2),
               ContinualTask(dataset=_spec(11, 22), c_new_experts=1)],
        budget=budget,
    )
    reports = run_continual(pretrained, plan)

    assert [r.dataset_id for r in reports] == [10, 11]
    assert reports[1].added_experts == [[8], [8]]
    assert all(layer.router(10).expert_ids == tuple(range(8)) for layer in pretrained.moe_layers)
    _assert_old_metrics_identical(reports[1], [0, 1, 2, 10])


def test_run_plan_dispatch(pretrained, downstream_spec, budget):
    plan = AdaptPlan(mode="router_plus_experts", dataset=downstream_spec, k_experts=2,
                     selection="most_used", budget=budget)
    report = run_plan(pretrained, plan)
    assert report.mode == "router_plus_experts"
    assert [len(ids) for ids in report.tuned_experts] == [2, 2]

    missing = AdaptPlan(mode="topk_reduce", dataset_id=42, new_k=1, budget=budget)
    with pytest.raises(MissingEntityError):
        run_plan(pretrained, missing)


def test_plan_validation():
    with pytest.raises(ValueError):
        AdaptPlan(mode="router_only")
    with pytest.raises(ValueError):
        AdaptPlan(mode="prune", dataset_id=0)
    with pytest.raises(ValueError):
        AdaptPlan(mode="hybrid", dataset=_spec(10, 21))
    with pytest.raises(ValueError):
        AdaptPlan(mode="hybrid", dataset=_spec(10, 21), recipe="A", steps=[HybridStep(kind="router_plus")])
    with pytest.raises(ValueError):
        HybridStep(kind="prune")
    with pytest.raises(ValueError):
        HybridStep(kind="topk_reduce")
