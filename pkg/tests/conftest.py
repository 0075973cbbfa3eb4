import numpy as np
import pytest

from cfurllc.scenario import LargeScaleModel


def toy_model(beta, service_sets=None, weights=None, energy=1e12) -> LargeScaleModel:
    """Build a LargeScaleModel directly from a gain matrix for hand examples."""
    beta = np.asarray(beta, dtype=float)
    m, k = beta.shape
    if service_sets is None:
        service_sets = tuple(tuple(np.argsort(-beta[:, j])) for j in range(k))
    if weights is None:
        weights = np.ones(k)
    return LargeScaleModel(
        beta=beta,
        service_sets=tuple(tuple(s) for s in service_sets),
        positions_ap=np.zeros((m, 2)),
        positions_dev=np.zeros((k, 2)),
        weights=np.asarray(weights, dtype=float),
        energy=np.full(k, float(energy)),
    )


def random_model(rng, num_aps=None, num_devices=None, set_size=None,
                 beta_scale=1.0) -> LargeScaleModel:
    """Random gains/service sets for property suites (scale-free)."""
    m = num_aps or int(rng.integers(1, 6))
    k = num_devices or int(rng.integers(1, 6))
    beta = beta_scale * np.exp(rng.normal(0.0, 2.0, size=(m, k)))
    sets = []
    for j in range(k):
        size = set_size or int(rng.integers(1, m + 1))
        order = np.argsort(-beta[:, j])
        sets.append(tuple(int(i) for i in order[:size]))
    return toy_model(beta, sets, weights=rng.uniform(0.0, 1.0, size=k))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
