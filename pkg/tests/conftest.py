import numpy as np
import pytest

from wiplab.dynamics import WipParams


@pytest.fixture
def params():
    return WipParams()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
