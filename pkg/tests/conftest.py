import numpy as np
import pytest

from ttnlab.data import gen_shapeset
from ttnlab.nn import TrainConfig, pretrain, tiny_convnet


def randomize_norms(model, rng):
    """Give every norm layer non-trivial affine parameters and source statistics."""
    for layer in model.norm_layers:
        c = layer.channels
        dt = layer.gamma.dtype
        layer.gamma = rng.uniform(0.5, 1.5, c).astype(dt)
        layer.beta = rng.normal(0, 0.3, c).astype(dt)
        layer.running_mean = rng.normal(0, 0.5, c).astype(dt)
        layer.running_var = rng.uniform(0.5, 2.0, c).astype(dt)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model64():
    m = tiny_convnet(10, seed=3, dtype=np.float64)
    return randomize_norms(m, np.random.default_rng(99))


@pytest.fixture(scope="session")
def small_shapeset():
    return gen_shapeset(0, 100)


@pytest.fixture(scope="session")
def small_trained(small_shapeset):
    """A quickly pre-trained model on a small ShapeSet (cached for the session)."""
    train, _ = small_shapeset
    return pretrain(tiny_convnet(10, 0), train, TrainConfig(epochs=5, batch_size=32, lr=1e-2, seed=0))
