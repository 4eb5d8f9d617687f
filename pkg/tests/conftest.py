"""
Pytest configuration and fixtures
"""
import os

# Keep test runs from writing rotating log files into the repository
os.environ.setdefault("IVUQ_LOG_TO_FILE", "false")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from ivuq.schemas.ivim import BValueSchedule, PriorRanges
from ivuq.schemas.network import HeadSpec, TrainConfig
from ivuq.services.ensemble import train_ensemble
from ivuq.services.synthdata import sample_training_set, split_train_validation


@pytest.fixture
def schedule():
    """The 14 b-value acquisition used throughout"""
    return BValueSchedule()


@pytest.fixture
def short_schedule():
    """A shorter schedule that still satisfies the segmented fit"""
    return BValueSchedule(values=[0, 50, 100, 300, 500, 800])


@pytest.fixture
def ranges():
    return PriorRanges()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_training_set():
    """2,000 noisy records, split 80/20"""
    data = sample_training_set(2000, seed=7)
    return split_train_validation(data, 0.8, seed=7)


@pytest.fixture(scope="session")
def quick_train_config():
    return TrainConfig(learning_rate=1e-3, batch_size=128, epochs=3)


@pytest.fixture(scope="session")
def tiny_mdn_ensemble(small_training_set, quick_train_config):
    """Three K=3 MDN members, a few epochs, width 16"""
    train, validation = small_training_set
    return train_ensemble(
        HeadSpec.mdn(3), train, quick_train_config, m=3, base_seed=11,
        validation=validation, hidden_width=16, workers=1,
    )


@pytest.fixture(scope="session")
def tiny_point_ensemble(small_training_set, quick_train_config):
    train, validation = small_training_set
    return train_ensemble(
        HeadSpec.point(), train, quick_train_config, m=2, base_seed=11,
        validation=validation, hidden_width=16, workers=1,
    )
