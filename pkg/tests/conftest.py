import warnings

import numpy as np
import pytest

from clothtrack.mesh import grid_mesh
from clothtrack.sim import generate_scene


@pytest.fixture(scope="session")
def small_scene():
    """4x4 towel, 2 views, 32 px, 4 steps: cheap enough for unit tests."""
    return generate_scene("TOWEL", size_params={"nx": 4, "ny": 4}, n_views=2, image_wh=(32, 32), rng_seed=3, n_steps=4)


@pytest.fixture
def grid():
    return grid_mesh(0.2, 0.2, 5, 5)


@pytest.fixture(autouse=True)
def _strict_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
