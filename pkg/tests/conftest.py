import numpy as np
import pytest

from lenslessnvs.datasetio import generate_procedural_scene


@pytest.fixture(scope="session")
def ring_scene():
    """12-view procedural camera ring shared by geometry-heavy tests."""
    return generate_procedural_scene(n_views=12, image_size=32, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
