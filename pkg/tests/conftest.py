import numpy as np
import pytest

from mixturelab.model import MixtureModel


def random_spd(rng, m, low=0.3, high=3.0):
    """Random SPD matrix with eigenvalues in [low, high]."""
    q, _ = np.linalg.qr(rng.standard_normal((m, m)))
    eig = rng.uniform(low, high, size=m)
    a = (q * eig) @ q.T
    return 0.5 * (a + a.T)


def random_model(rng, k, m, spread=2.0):
    weights = rng.dirichlet(np.full(k, 3.0))
    means = rng.normal(scale=spread, size=(k, m))
    covs = np.array([random_spd(rng, m) for _ in range(k)])
    return MixtureModel(weights, means, covs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
