import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from carnot_flow.group_core import preset

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def h1():
    return preset("h1")


@pytest.fixture(scope="session")
def r1():
    return preset("r1")


@pytest.fixture(scope="session")
def r2():
    return preset("r2")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
