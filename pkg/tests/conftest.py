"""Shared fixtures: a tiny model configuration and small corpora that keep
unit tests fast. Long training runs live in test_acceptance.py only."""

import numpy as np
import pytest

from mia.config import ModelConfig, TrainConfig
from mia.encoders import MiaModel


def tiny_config(**overrides) -> ModelConfig:
    base = dict(embed_dim=8, hidden_dim=8, global_dim=16, lift_dim=16,
                mlp_hidden=8, part_dim=8, backbone_channels=(4, 4, 6, 8),
                n_parts=6, seed=3)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def model(config):
    return MiaModel(config, vocab_size=12, num_ids=4)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(step1_epochs=1, step2_epochs=1, step3_epochs=1,
                       batch_size=4)
