import numpy as np
import pytest

from dood.schedule import build_linear_schedule


@pytest.fixture(scope="session")
def sched():
    return build_linear_schedule()


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
