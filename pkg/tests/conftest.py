"""
Test configuration and fixtures.
"""
import json

import pytest

from hetmoe.models.schemas import AdaptBudget, DatasetSpec, ModelConfig, RunConfig, TrainConfig
from hetmoe.network.model import HeterogeneousModel
from hetmoe.services.training_service import Trainer, TrainState


@pytest.fixture
def model_config():
    """A 2-block model with 6 experts per MoE layer and Top-2 routing."""
    return ModelConfig(d_in=4, d=8, n_blocks=2, moe_every=1, n_experts=6, top_k=2, hidden_budget=8)


@pytest.fixture
def specs():
    """Three small heterogeneous datasets: blobs, rings and sine regression."""
    return [
        DatasetSpec(dataset_id=0, name="blobs", task_kind="classification", generator="blobs",
                    d=4, n_classes=4, seed=1, n_train=256, n_test=128, batch_size=16,
                    w_sample=3.0, w_loss=1.0),
        DatasetSpec(dataset_id=1, name="rings", task_kind="classification", generator="rings",
                    d=4, n_classes=2, noise=0.1, seed=2, n_train=256, n_test=128, batch_size=16,
                    w_sample=2.0, w_loss=0.6),
        DatasetSpec(dataset_id=2, name="sine", task_kind="regression", generator="sine_regression",
                    d=4, out_dim=2, noise=0.05, seed=3, n_train=256, n_test=128, batch_size=16,
                    w_sample=1.0, w_loss=0.2),
    ]


@pytest.fixture
def downstream_spec():
    """A held-out rotated blobs task."""
    return DatasetSpec(dataset_id=10, name="rotated_blobs", task_kind="classification", generator="blobs",
                       d=4, n_classes=4, seed=21, rotate=True, n_train=256, n_test=128, batch_size=16)


@pytest.fixture
def train_config():
    return TrainConfig(total_iters=30, peak_lr=0.05, warmup_frac=0.1, clip_norm=1.0, lambda_mi=0.1, seed=0)


@pytest.fixture
def budget():
    return AdaptBudget(iters=10, peak_lr=0.05, clip_norm=1.0, probe_iters=4, seed=0)


@pytest.fixture
def build_model(model_config, specs):
    """Factory for a registered, untrained model."""
    def _build(config=None, seed=0, datasets=None):
        model = HeterogeneousModel(config or model_config, seed=seed)
        for spec in datasets if datasets is not None else specs:
            model.register_dataset(spec)
        return model
    return _build


@pytest.fixture
def pretrained(build_model, specs, train_config):
    """A model after a short heterogeneous pretraining run."""
    model = build_model()
    state = TrainState.start(train_config)
    Trainer(model, specs, train_config, state=state).run()
    return model


@pytest.fixture
def run_config_file(tmp_path, model_config, specs, train_config):
    """Write a run configuration and return its path."""
    def _write(name="config.json", **sections):
        config = RunConfig(version=1, model=model_config, datasets=specs, train=train_config)
        data = config.model_dump(mode="json", exclude_none=True)
        data.update(sections)
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return path
    return _write
