import numpy as np
import pytest

from evroad.core.config import ModelConfig, SslConfig, TrainConfig
from evroad.services.events import DAVIS346, Event, SensorGeometry, make_window


@pytest.fixture
def davis():
    return SensorGeometry(*DAVIS346)


@pytest.fixture
def small_config():
    """Default block layout at N=8 with a narrow trunk."""
    return ModelConfig(n=8, d_e=12, n_heads=4, n_blocks=2, block_ffn=[24, 12], trunk_ffn=[32, 16])


@pytest.fixture
def tiny_config():
    return ModelConfig(n=8, d_e=8, n_heads=2, n_blocks=1, block_ffn=[8], trunk_ffn=[16])


@pytest.fixture
def fast_ssl():
    return SslConfig(batch_size=8, epochs=2, seed=0)


@pytest.fixture
def fast_train():
    return TrainConfig(batch_size=8, epochs=2, max_samples=256, seed=0)


def random_window(geom: SensorGeometry, n: int, seed: int = 0, positive: int = None):
    """Window of ``n`` events at random pixels with increasing timestamps."""
    rng = np.random.default_rng(seed)
    xs = rng.integers(0, geom.width, size=n)
    ys = rng.integers(0, geom.height, size=n)
    ts = np.cumsum(rng.integers(1, 100, size=n))
    if positive is None:
        ps = rng.choice([-1, 1], size=n)
    else:
        ps = np.array([1] * positive + [-1] * (n - positive))
    return make_window([Event(x=int(x), y=int(y), t=int(t), p=int(p)) for x, y, t, p in zip(xs, ys, ts, ps)], geom)


@pytest.fixture
def make_random_window():
    return random_window
