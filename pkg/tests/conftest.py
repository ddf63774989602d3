import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hals.rangeimg import SensorModel

settings.register_profile("hals", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("hals")


@pytest.fixture
def small_sensor():
    return SensorModel(height=4, width=8, f_up=15.0, f_down=15.0, max_range=100.0)


@pytest.fixture
def toy_sensor():
    return SensorModel(height=16, width=128, f_up=2.0, f_down=24.8, max_range=80.0, min_range=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
