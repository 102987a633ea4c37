"""
Test the learning-rate schedule, training steps, evaluation and metrics files.
"""
import json

import numpy as np
import polars as pl
import pytest

from hetmoe.autograd import Tensor
from hetmoe.core.config import settings
from hetmoe.core.exceptions import ConfigError, NumericError
from hetmoe.models.schemas import DatasetSpec, Split, TrainConfig
from hetmoe.network.model import HeterogeneousModel
from hetmoe.services.metrics_service import MetricsSink, load_metrics, summarize_metrics
from hetmoe.services.optimizers import Adam, SGDMomentum, build_optimizer
from hetmoe.services.training_service import (
    Trainer,
    TrainState,
    evaluate,
    layer_mutual_information,
    lr_at,
    seed_study,
    train_step,
)


def _params(model):
    return {name: t.data.copy() for name, t in model.named_parameters()}


def _assert_same_params(a, b):
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name], err_msg=name)


def test_lr_schedule():
    cfg = TrainConfig(total_iters=10, peak_lr=1.0, warmup_frac=0.2)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(1, cfg) == pytest.approx(0.5)
    assert lr_at(2, cfg) == pytest.approx(1.0)
    assert lr_at(9, cfg) == pytest.approx(1 / 8)
    for bad in (-1, 10):
        with pytest.raises(ConfigError):
            lr_at(bad, cfg)


def test_lr_schedule_without_warmup():
    cfg = TrainConfig(total_iters=4, peak_lr=2.0, warmup_frac=0.0)
    assert [lr_at(i, cfg) for i in range(4)] == pytest.approx([2.0, 1.5, 1.0, 0.5])


def test_build_optimizer():
    assert isinstance(build_optimizer(TrainConfig()), SGDMomentum)
    assert isinstance(build_optimizer(TrainConfig(optimizer="adam")), Adam)


def test_optimizer_state_restarts_on_shape_change():
    opt = SGDMomentum(momentum=0.5)
    p = Tensor(np.zeros(3), requires_grad=True)
    opt.step([("w", p, np.ones(3))], lr=1.0)
    np.testing.assert_allclose(p.data, -1.0)
    p.data = np.zeros(2)
    opt.step([("w", p, np.ones(2))], lr=1.0)
    np.testing.assert_allclose(p.data, -1.0)


def test_train_step_report(build_model, specs, train_config):
    model = build_model()
    state = TrainState.start(train_config)
    report = train_step(model, specs, state, train_config)

    assert report.iter == 0
    assert state.iteration == 1
    assert report.lr == 0.0
    assert report.clipped_norm <= train_config.clip_norm + 1e-12
    spec = specs[report.dataset_id]
    assert [sum(h) for h in report.usage] == [spec.batch_size * 2] * 2
    assert state.positions[report.dataset_id] == 1


def test_clipped_norm_never_exceeds_the_bound(build_model, specs):
    cfg = TrainConfig(total_iters=15, peak_lr=0.5, clip_norm=0.01, seed=2)
    reports = Trainer(build_model(), specs, cfg).run()
    assert len(reports) == 15
    assert all(r.clipped_norm <= 0.01 + 1e-12 for r in reports)
    assert any(r.grad_norm > 0.01 for r in reports)


def test_frozen_model_is_not_updated(build_model, specs, train_config):
    model = build_model()
    model.freeze_all()
    before = _params(model)
    state = TrainState.start(train_config)
    for _ in range(5):
        train_step(model, specs, state, train_config)
    _assert_same_params(before, _params(model))
    # Usage statistics still flow into the buffers.
    assert any(layer.buffer.initialized.any() for layer in model.moe_layers)


def test_training_is_deterministic(build_model, specs, train_config):
    a, b = build_model(), build_model()
    reports_a = Trainer(a, specs, train_config).run()
    reports_b = Trainer(b, specs, train_config).run()
    assert [r.model_dump() for r in reports_a] == [r.model_dump() for r in reports_b]
    _assert_same_params(_params(a), _params(b))


def test_split_run_matches_single_run(build_model, specs, train_config):
    whole = build_model()
    Trainer(whole, specs, train_config).run()

    split = build_model()
    trainer = Trainer(split, specs, train_config)
    assert len(trainer.run(iters=12)) == 12
    assert len(trainer.run()) == train_config.total_iters - 12
    assert trainer.run() == []

    _assert_same_params(_params(whole), _params(split))


def test_prefetch_depth_does_not_change_training(build_model, specs, train_config, monkeypatch):
    monkeypatch.setattr(settings, "THREADS", 0)
    sync = build_model()
    Trainer(sync, specs, train_config).run()

    monkeypatch.setattr(settings, "THREADS", 2)
    prefetched = build_model()
    Trainer(prefetched, specs, train_config).run()

    _assert_same_params(_params(sync), _params(prefetched))


def test_dataset_choice_follows_sampling_weights(build_model, specs):
    cfg = TrainConfig(total_iters=600, peak_lr=0.01, clip_norm=1.0, seed=4, log_every=1000)
    reports = Trainer(build_model(), specs, cfg).run()
    freqs = np.bincount([r.dataset_id for r in reports], minlength=3) / len(reports)
    np.testing.assert_allclose(freqs, [0.5, 1 / 3, 1 / 6], atol=0.06)


def test_non_finite_weights_raise_numeric_error(build_model, specs, train_config):
    model = build_model()
    model.heads[0].w.data[:] = np.nan
    with pytest.raises(NumericError):
        train_step(model, specs[:1], TrainState.start(train_config), train_config)


def test_batch_from_unknown_spec(build_model, specs, train_config):
    model = build_model()
    state = TrainState.start(train_config)
    item = state.stream(specs[:1]).next()
    with pytest.raises(ConfigError):
        train_step(model, specs[1:], state, train_config, item)


def test_blobs_are_learned(model_config, specs):
    model = HeterogeneousModel(model_config, seed=0)
    model.register_dataset(specs[0])
    cfg = TrainConfig(total_iters=300, peak_lr=0.02, clip_norm=1.0, optimizer="adam", seed=0, log_every=1000)
    Trainer(model, specs[:1], cfg).run()
    assert evaluate(model, specs[0]).accuracy > 0.9


def test_evaluate_is_read_only(pretrained, specs):
    before = _params(pretrained)
    buffers = [layer.buffer.values.copy() for layer in pretrained.moe_layers]
    metrics = evaluate(pretrained, specs[1], Split.TEST)

    _assert_same_params(before, _params(pretrained))
    for layer, values in zip(pretrained.moe_layers, buffers):
        np.testing.assert_array_equal(layer.buffer.values, values)

    assert metrics.n_samples == specs[1].n_test
    assert 0.0 <= metrics.accuracy <= 1.0
    assert metrics.mse is None
    assert metrics.expert_evals_per_sample == pytest.approx(2 * 2)
    for usage, gates in zip(metrics.usage, metrics.gate_mean):
        assert sum(usage.values()) == pytest.approx(2.0)
        assert sum(gates.values()) == pytest.approx(1.0)


def test_evaluate_regression(pretrained, specs):
    metrics = evaluate(pretrained, specs[2], "train")
    assert metrics.accuracy is None
    assert metrics.mse >= 0.0
    assert metrics.r2 <= 1.0
    assert metrics.score == metrics.r2


def test_layer_mutual_information(pretrained, specs):
    values = layer_mutual_information(evaluate(pretrained, spec) for spec in specs)
    assert len(values) == 2
    assert all(-1e-12 <= v <= np.log(3) + 1e-12 for v in values)
    assert layer_mutual_information([]) == []


def test_metrics_file_and_summary(tmp_path, build_model, specs, train_config):
    path = tmp_path / "metrics" / "train.ndjson"
    with MetricsSink(path) as sink:
        Trainer(build_model(), specs, train_config, sink=sink).run()
    assert sink.records == train_config.total_iters

    lines = path.read_text().splitlines()
    assert len(lines) == train_config.total_iters
    first = json.loads(lines[0])
    assert {"iter", "dataset_id", "task_loss", "mi_loss", "lr", "grad_norm", "clipped_norm", "usage"} <= first.keys()

    summary = summarize_metrics(path)
    assert summary["dataset_id"].to_list() == sorted(summary["dataset_id"].to_list())
    assert summary["steps"].sum() == train_config.total_iters
    assert summary["share"].sum() == pytest.approx(1.0)
    assert summarize_metrics(load_metrics(path)).equals(summary)


def test_sink_without_path_only_counts(specs):
    sink = MetricsSink()
    sink.write(DatasetSpec(dataset_id=0, task_kind="regression", generator="sine_regression",
                           n_train=16, n_test=16, batch_size=4))
    sink.close()
    assert sink.records == 1


def test_seed_study_collects_one_row_per_seed():
    df = seed_study(lambda seed: {"score": seed * 0.5}, [0, 1, 2])
    assert isinstance(df, pl.DataFrame)
    assert df["seed"].to_list() == [0, 1, 2]
    assert df["score"].to_list() == [0.0, 0.5, 1.0]
