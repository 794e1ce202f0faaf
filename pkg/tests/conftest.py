import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from satblock.synth import SceneSpec, make_rpc, render_scene

settings.register_profile("satblock", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("satblock")


@pytest.fixture(scope="session")
def small_scene():
    """Six images, 128 px, a handful of tracks; renders in well under a second."""
    return render_scene(SceneSpec(seed=11, grid=128, n_points=40, n_check=10))


@pytest.fixture(scope="session")
def clean_scene():
    """No match noise, no image noise: an exact-geometry oracle."""
    return render_scene(
        SceneSpec(seed=5, grid=128, n_points=30, n_check=8, match_noise=0.0, image_noise=0.0)
    )


@pytest.fixture(scope="session")
def models():
    spec = SceneSpec(seed=3)
    return {i: make_rpc(spec, i) for i in range(4)}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

