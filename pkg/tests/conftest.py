import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hemgs.model import HemgsModel
from hemgs.scene import SynthSpec, synth_scene

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_scene():
    return synth_scene(SynthSpec(300, seed=11, pattern="clustered"))


@pytest.fixture(scope="session")
def small_model(small_scene):
    """Untrained but perturbed model so every path carries signal."""
    m = HemgsModel.init(small_scene.feature_dim, small_scene.offsets_per_anchor, seed=4)
    m.calibrate(small_scene)
    rng = np.random.default_rng(9)
    for name, arr in m.param_groups().items():
        arr += rng.normal(0.0, 0.02 if name.startswith("hash") else 0.05, arr.shape)
    return m.rounded()
