import numpy as np
import pytest

from pocketdiff.schemas.config import DenoiserConfig, TrainConfig
from pocketdiff.services.denoiser import DenoiserParams
from pocketdiff.services.schedules import schedule_service
from pocketdiff.tests.factories import make_complex


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow", default=False):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(2021)


@pytest.fixture
def small_schedule():
    return schedule_service.build_noise_schedule(10, 1e-3, 0.2)


@pytest.fixture
def tiny_config():
    return DenoiserConfig(hidden_dim=16, num_layers=2, time_dim=8, K=4, K_P=2, T=10)


@pytest.fixture
def tiny_params(tiny_config):
    return DenoiserParams.initialize(tiny_config, np.random.default_rng(7))


@pytest.fixture
def small_complex(rng):
    return make_complex(rng)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        total_steps=3,
        batch_size=2,
        diffusion_steps=10,
        hidden_dim=16,
        num_layers=2,
        time_dim=8,
        lr=1e-3,
        log_every=1,
        checkpoint_every=0,
    )
