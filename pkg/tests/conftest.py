import numpy as np
import pytest
from hypothesis import settings

from blindfl.fhe import FheParams

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_ckks():
    """A 16-slot ring; insecure, for fast structural tests."""
    return FheParams("ckks", 32, 40, (60, 40, 40, 60), "test")


@pytest.fixture(scope="session")
def tiny_oracle():
    return FheParams("oracle", 32, 40, (60, 40, 40, 60), "test")
