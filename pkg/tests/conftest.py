import numpy as np
import pytest

from stagann.data import SyntheticSpec, generate_synthetic
from stagann.graph import row_normalize
from stagann.model import KrigeBatch


def make_batch(n=5, seed=0, b=2, unknown=(0,), length=24, coords=True):
    """Random batch with some unknown rows zeroed."""
    rng = np.random.default_rng(seed)
    target = rng.normal(size=(b, n, length))
    known = np.ones(n, dtype=bool)
    known[list(unknown)] = False
    w = np.abs(rng.normal(size=(n, n)))
    xy = np.c_[34.0 + 0.2 * rng.random(n), -118.4 + 0.04 * rng.random(n)] if coords else None
    ts = np.datetime64("2024-01-01T06:00") + rng.integers(0, 2000, size=b) * np.timedelta64(5, "m")
    return KrigeBatch(target * known[:, None], row_normalize(w), ts, known, np.zeros(n, dtype=bool), xy,
                      target, np.arange(n))


@pytest.fixture
def batch():
    return make_batch()


@pytest.fixture(scope="session")
def small_dataset():
    ds, shifts = generate_synthetic(SyntheticSpec(n=10, t=300, seed=3))
    return ds
