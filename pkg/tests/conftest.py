import numpy as np
import pytest
from hypothesis import settings

from flowtopo.geometry import ChartManifold

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def line():
    return ChartManifold.euclidean(1, 10.0)


@pytest.fixture
def polar():
    # radial coordinate kept away from the axis
    return ChartManifold.build(2, [(0.2, 5.0), (-4.0, 4.0)], [["1", "0"], ["0", "x1^2"]])


@pytest.fixture
def rng():
    return np.random.default_rng(0)
