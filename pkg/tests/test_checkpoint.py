"""
Test checkpoint save/load, byte stability and training continuation.
"""
import json

import numpy as np
import pytest

from hetmoe.core.exceptions import ConfigError, MissingEntityError
from hetmoe.models.schemas import RunConfig
from hetmoe.services.checkpoint_service import checkpoint_digest, load_checkpoint, save_checkpoint
from hetmoe.services.training_service import Trainer, TrainState


@pytest.fixture
def run_config(model_config, specs, train_config):
    return RunConfig(version=1, model=model_config, datasets=specs, train=train_config)


def _assert_same_model(a, b):
    params_a, params_b = a.named_parameters(), b.named_parameters()
    assert [n for n, _ in params_a] == [n for n, _ in params_b]
    for (name, ta), (_, tb) in zip(params_a, params_b):
        np.testing.assert_array_equal(ta.data, tb.data, err_msg=name)
        assert ta.requires_grad == tb.requires_grad, name
    for la, lb in zip(a.moe_layers, b.moe_layers):
        np.testing.assert_array_equal(la.buffer.values, lb.buffer.values)
        assert list(la.buffer.initialized) == list(lb.buffer.initialized)
        assert la.next_expert_id == lb.next_expert_id


def test_round_trip_restores_every_bit(tmp_path, pretrained, run_config):
    path = tmp_path / "model.json"
    digest = save_checkpoint(path, pretrained, run_config)
    loaded = load_checkpoint(path)

    _assert_same_model(pretrained, loaded.model)
    assert loaded.state is None
    assert loaded.config == run_config
    assert checkpoint_digest(path) == digest

    x = np.random.default_rng(0).standard_normal((20, 4))
    for dataset_id in pretrained.dataset_ids:
        np.testing.assert_array_equal(loaded.model.predict(x, dataset_id), pretrained.predict(x, dataset_id))


def test_same_state_gives_identical_bytes(tmp_path, pretrained, run_config):
    first = save_checkpoint(tmp_path / "a.json", pretrained, run_config)
    second = save_checkpoint(tmp_path / "b.json", pretrained, run_config)
    assert first == second

    reloaded = load_checkpoint(tmp_path / "a.json")
    assert save_checkpoint(tmp_path / "c.json", reloaded.model, reloaded.config) == first
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "c.json").read_bytes()


def test_resumed_training_matches_uninterrupted(tmp_path, build_model, specs, run_config):
    cfg = run_config.train

    whole = build_model()
    Trainer(whole, specs, cfg, state=TrainState.start(cfg)).run(iters=20)

    first = build_model()
    state = TrainState.start(cfg)
    Trainer(first, specs, cfg, state=state).run(iters=10)
    save_checkpoint(tmp_path / "half.json", first, run_config, state)

    loaded = load_checkpoint(tmp_path / "half.json")
    assert loaded.state.iteration == 10
    assert loaded.state.positions == state.positions
    Trainer(loaded.model, loaded.config.datasets, cfg, state=loaded.state).run(iters=10)

    _assert_same_model(whole, loaded.model)


def test_structure_changes_survive_a_round_trip(tmp_path, pretrained, run_config, downstream_spec):
    pretrained.remove_experts([[0], [5]])
    pretrained.add_experts(1)
    pretrained.register_dataset(downstream_spec, top_k_override=1)
    pretrained.freeze_all()

    save_checkpoint(tmp_path / "grown.json", pretrained, run_config)
    loaded = load_checkpoint(tmp_path / "grown.json").model

    assert [layer.expert_ids for layer in loaded.moe_layers] == [(1, 2, 3, 4, 5, 6), (0, 1, 2, 3, 4, 6)]
    assert loaded.moe_layers[0].router(10).expert_ids == (1, 2, 3, 4, 5, 6)
    assert loaded.moe_layers[0].router(0).expert_ids == (1, 2, 3, 4, 5)
    assert loaded.top_k(10) == 1
    assert loaded.specs[10] == downstream_spec
    assert loaded.trainable_parameters() == []
    _assert_same_model(pretrained, loaded)
    assert loaded.add_experts(1) == [[7], [7]]


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingEntityError):
        load_checkpoint(tmp_path / "nope.json")
    with pytest.raises(MissingEntityError):
        checkpoint_digest(tmp_path / "nope.json")


def test_unsupported_version(tmp_path, pretrained, run_config):
    path = tmp_path / "model.json"
    save_checkpoint(path, pretrained, run_config)
    document = json.loads(path.read_text())
    document["version"] = 99
    path.write_text(json.dumps(document))
    with pytest.raises(ConfigError):
        load_checkpoint(path)


def test_corrupt_checkpoint(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_checkpoint(path)


def test_non_finite_weights_cannot_be_saved(tmp_path, pretrained, run_config):
    pretrained.embed.w.data[0, 0] = np.inf
    with pytest.raises(ConfigError):
        save_checkpoint(tmp_path / "bad.json", pretrained, run_config)
    assert not (tmp_path / "bad.json").exists()
