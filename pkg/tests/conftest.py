import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ar2vp.scene import GridSpec, ScenarioConfig, generate_scenario, make_frame

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_scenario():
    return generate_scenario(3, ScenarioConfig(n_agents=2, num_steps=4))


@pytest.fixture
def tiny_frames(tiny_scenario):
    """Two 4x4 frames with two vehicles and the RSU."""
    return [make_frame(tiny_scenario, t, GridSpec(4, 4, 1.0), 8.0, 22.0) for t in range(2)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
