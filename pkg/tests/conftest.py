import numpy as np
import pytest

from voxelview.volume import make_test_object


@pytest.fixture(scope="session")
def car32():
    return make_test_object("car", 32)


@pytest.fixture(scope="session")
def cube32():
    return make_test_object("cube", 32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
