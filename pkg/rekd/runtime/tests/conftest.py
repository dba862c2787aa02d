import numpy as np
import pytest
from scipy import ndimage
from src.config import RekdConfig, runtime_settings
from src.model import RekdModel


@pytest.fixture
def deterministic():
    runtime_settings.deterministic = True
    yield
    runtime_settings.deterministic = False


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_config():
    return RekdConfig(
        group_order=8,
        channels=2,
        num_layers=2,
        num_scales=2,
        window_sizes=[8, 16],
        window_weights=[4.0, 1.0],
    )


@pytest.fixture
def small_model(small_config):
    return RekdModel.initialize(small_config, seed=0)


@pytest.fixture
def textured():
    """Smooth random float32 image in [0, 1]."""

    def make(size=64, seed=0):
        noise = np.random.default_rng(seed).uniform(0.0, 1.0, (size, size))
        img = ndimage.gaussian_filter(noise, 2.0)
        img = (img - img.min()) / (img.max() - img.min())
        return img.astype(np.float32)

    return make
