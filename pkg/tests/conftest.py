import numpy as np
import pytest

from tfguide.oracles import MixtureModel
from tfguide.schedule import NoiseSchedule, make_schedule


@pytest.fixture
def quarter():
    """Tiny table with alpha = (1, 0.5, 0.25, 0.1); step 2 has alpha = 0.25."""
    return NoiseSchedule(np.array([1.0, 0.5, 0.25, 0.1]))


@pytest.fixture(scope="session")
def linear():
    return make_schedule("linear-beta", 1000)


@pytest.fixture
def gauss_1d():
    return MixtureModel.single([2.0], 1.0)


@pytest.fixture
def bimodal_1d():
    return MixtureModel([0.5, 0.5], [[-2.0], [2.0]], [1.0, 1.0])


@pytest.fixture
def mix_2d():
    return MixtureModel([0.3, 0.5, 0.2], [[-2.0, 0.5], [1.5, 1.0], [0.0, -2.0]], [0.5, 1.2, 0.8])
