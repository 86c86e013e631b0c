import numpy as np
import pytest

from softalign.synthgen import SynthSpec, generate
from softalign.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def small_dataset():
    """Small synthetic dataset shared by trainer/harness/CLI tests."""
    return generate(SynthSpec(n_samples=200, d_roi=48, latent_dim=24, seed=11))


@pytest.fixture(scope="session")
def small_config():
    return TrainConfig(epochs=4, batch_size=25, seed=7)


@pytest.fixture(scope="session")
def small_state(small_dataset, small_config):
    state, metrics = train(small_dataset, small_config)
    return state, metrics


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
