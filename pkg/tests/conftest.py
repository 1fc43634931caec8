import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dataset():
    from fluidbench.dataset import GaussianMixtureSpec, synth_gaussian
    return synth_gaussian(GaussianMixtureSpec(8, 6, 6.0, 80, 0.25, seed=5))
