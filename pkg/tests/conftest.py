import numpy as np
import pytest

from objcomposer.schedule import make_linear_schedule


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sched50():
    return make_linear_schedule(1000, 1e-4, 0.02, 50)


@pytest.fixture(scope="session")
def sched10():
    return make_linear_schedule(1000, 1e-4, 0.02, 10)

