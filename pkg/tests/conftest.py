import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from keypose_diffusion import tensor as T

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _float64():
    with T.default_dtype(np.float64):
        yield
    T.current_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
