import numpy as np
import pytest

from fairshare import normalize


def random_instance(rng, max_classes=5, max_resources=5, zeros=False, mult_high=1):
    """One random normalized instance: matrix plus multiplicities."""
    K = int(rng.integers(1, max_classes + 1))
    J = int(rng.integers(1, max_resources + 1))
    a = rng.uniform(0.02, 1.0, (K, J))
    if zeros and rng.random() < 0.3:
        a = np.where(rng.random((K, J)) < 0.25, 0.0, a)
    a[np.arange(K), rng.integers(0, J, K)] = 1.0
    mult = rng.integers(1, mult_high + 1, K) if mult_high > 1 else np.ones(K, dtype=int)
    return normalize(a), mult


@pytest.fixture
def rng():
    return np.random.default_rng(987654321)
