import numpy as np
import pytest

from saq.diffusion import NoiseSchedule, ToyDistribution
from saq.noisenet import NetConfig, OptimizerConfig, train_denoiser


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule()


@pytest.fixture(scope="session")
def normal_net(schedule):
    """Default network trained 5000 steps on N(0, I)."""
    cfg = NetConfig()
    res = train_denoiser(cfg, ToyDistribution.gaussian([0.0, 0.0], 1.0), schedule, seed=0)
    return cfg, res


@pytest.fixture(scope="session")
def ring_net(schedule):
    """Default network trained on the 8-mode ring."""
    cfg = NetConfig()
    res = train_denoiser(cfg, ToyDistribution.ring(), schedule, OptimizerConfig(steps=3000), seed=1)
    return cfg, res.params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
