import numpy as np
import pytest

from stnn import autodiff as ad


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.current_tape().clear()
    ad.set_default_dtype(np.float64)
    yield
    ad.current_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
