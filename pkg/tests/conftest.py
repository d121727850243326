import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from capacitylab.green import get_table

settings.register_profile("lab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("lab")


@pytest.fixture(scope="session")
def T3():
    return get_table(3)


@pytest.fixture(scope="session")
def T4():
    return get_table(4)


@pytest.fixture(scope="session")
def T5():
    return get_table(5)


def pts(rows, d=3):
    return np.asarray(rows, dtype=np.int64).reshape(-1, d)
