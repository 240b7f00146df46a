"""
Shared fixtures: micro configurations, models and a tiny generated dataset
"""
import os

import pytest
import torch

from mulmon.config import ModelConfig, SceneGenConfig, SplitConfig, TrainConfig, load_experiment_config
from mulmon.network import build_model
from mulmon.scene_data import generate_dataset


def pytest_collection_modifyitems(config, items):
    if os.environ.get("MULMON_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set MULMON_RUN_SLOW=1 to run toy-scale experiments")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def micro_model_config():
    """K=2, D=4, 8x8 model for exact numerical checks"""
    return ModelConfig(
        num_slots=2,
        z_dims=4,
        image_size=8,
        transform_hidden=8,
        decoder_channels=4,
        decoder_layers=1,
        refine_channels=(4, 4, 4, 4),
        refine_hidden=8,
        refine_features=8,
        lstm_hidden=8,
    )


@pytest.fixture
def micro_model(micro_model_config):
    """Float64 micro model with a non-zero refinement head"""
    return build_model(micro_model_config, seed=7, dtype=torch.float64)


@pytest.fixture
def micro_train_config():
    return TrainConfig(num_iterations=2, batch_size=2, max_observed=2, alpha_ig=1.0)


@pytest.fixture
def micro_scene_config():
    """8x8 scenes with 4 views and tiny splits"""
    return SceneGenConfig(
        image_size=8,
        views_per_scene=4,
        splits={"train": SplitConfig(num_scenes=4), "test": SplitConfig(num_scenes=2)},
    )


@pytest.fixture
def micro_experiment():
    """The micro preset as a full experiment config"""
    return load_experiment_config(preset="micro")


@pytest.fixture
def micro_dataset(micro_experiment):
    """Generated micro dataset (16x16, 4 views per scene)"""
    return generate_dataset(micro_experiment.data)


@pytest.fixture
def env_clean(monkeypatch, tmp_path):
    """Isolate MULMON_ settings from the host environment"""
    for key in list(os.environ):
        if key.startswith("MULMON_"):
            monkeypatch.delenv(key, raising=False)
    monkeypatch.setenv("MULMON_OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.setenv("MULMON_DEVICE", "cpu")
    monkeypatch.chdir(tmp_path)
    return tmp_path
