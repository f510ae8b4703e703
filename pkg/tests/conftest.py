import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("suite", max_examples=50, deadline=None)
settings.load_profile("suite")


def central_diff(f, x0, step=1e-6):
    """Entrywise central-difference gradient of a scalar function of an array."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat_x = x0.ravel()
    flat_g = grad.ravel()
    for i in range(flat_x.size):
        e = np.zeros_like(flat_x)
        e[i] = step
        hi = f((flat_x + e).reshape(x0.shape))
        lo = f((flat_x - e).reshape(x0.shape))
        flat_g[i] = (hi - lo) / (2.0 * step)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
