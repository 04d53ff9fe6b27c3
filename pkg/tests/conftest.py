import random

import pytest
import torch

from semiseg.config import ExperimentConfig, ModelConfig
from semiseg.data import generate_synthetic


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """Smallest profile that still exercises every code path (32px, depth 2)."""
    cfg = ExperimentConfig()
    cfg.model = ModelConfig(base_channels=4, depth=2, feature_channels=8, embed_dim=8,
                            grid_side=2)
    cfg.data.side = 32
    cfg.data.synth_count = 10
    cfg.train.total_epochs = 3
    cfg.train.stage1_epochs = 2
    cfg.train.labeled_per_batch = 2
    cfg.train.unlabeled_per_batch = 2
    return cfg


@pytest.fixture(scope="session")
def tiny_samples():
    return generate_synthetic(seed=5, count=10, side=32)


@pytest.fixture
def rng() -> random.Random:
    return random.Random(99)
