import numpy as np
import pytest
import torch

from ocusynth.config import SynthesisConfig


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def tiny_config():
    return SynthesisConfig(
        latent_dim=16, output_resolution=16, channel_schedule={4: 16, 8: 16, 16: 8}
    )


@pytest.fixture
def r32_config():
    return SynthesisConfig(
        latent_dim=16, output_resolution=32, channel_schedule={4: 16, 8: 16, 16: 8, 32: 8}
    )
