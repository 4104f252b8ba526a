"""Shared fixtures: a tiny encoder, a tiny synthetic world, and clean environment."""

import numpy as np
import pytest

from avm_lab.config import BackboneConfig, ModulationConfig, ReadoutConfig, RunConfig, TrainConfig, WorldConfig
from avm_lab.model import AvmModel, ModelSpec
from avm_lab.synthdata import generate_world

NUM_NEURONS = 5


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """Keep AVM_* variables from a developer shell or .env out of the tests."""
    for name in ("AVM_SEED", "AVM_LOG_LEVEL", "AVM_OUTPUT_DIR", "AVM_MAX_EPOCHS"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def tiny_backbone() -> BackboneConfig:
    return BackboneConfig(image_h=8, image_w=16, patch=4, embed_dim=16, num_blocks=2, num_heads=2, behavior_dim=3)


@pytest.fixture
def tiny_world_config() -> WorldConfig:
    return WorldConfig(
        num_neurons=NUM_NEURONS,
        image_h=8,
        image_w=16,
        behavior_dim=3,
        num_train_images=40,
        num_test_images=4,
        test_repeats=3,
    )


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    return TrainConfig(batch_size=8, lr=0.003, max_epochs=3)


@pytest.fixture
def tiny_config(tiny_backbone, tiny_world_config, tiny_train_config) -> RunConfig:
    return RunConfig(backbone=tiny_backbone, world=tiny_world_config, train=tiny_train_config).validate()


@pytest.fixture
def tiny_spec(tiny_backbone) -> ModelSpec:
    return ModelSpec(backbone=tiny_backbone, modulation=ModulationConfig(), readout=ReadoutConfig(), num_neurons=NUM_NEURONS)


@pytest.fixture
def tiny_model(tiny_spec) -> AvmModel:
    return AvmModel.build(tiny_spec)


@pytest.fixture
def tiny_world(tiny_world_config):
    """``(world, bundle)`` of the source condition."""
    return generate_world(tiny_world_config)


@pytest.fixture
def tiny_inputs(tiny_backbone):
    rng = np.random.default_rng(3)
    images = rng.standard_normal((3, tiny_backbone.image_h, tiny_backbone.image_w))
    behavior = rng.standard_normal((3, tiny_backbone.behavior_dim))
    return images, behavior
