import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from npjive.basis import FeatureBasis
from npjive.dgp import SurrogateDgpConfig, simulate_surrogate
from npjive.grouped import GroupedSample, assign_folds
from npjive.solver import FunctionalSpec

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")



@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def surrogate():
    """Small surrogate draw with folds, a 6-bin histogram and its target functional."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sim = simulate_surrogate(SurrogateDgpConfig(K=40, n=8, n_new=400, seed=3))
        sample = assign_folds(sim.sample, 3)
    basis = FeatureBasis.histogram_from_edges(np.linspace(sample.x.min(), sample.x.max(), 7))
    return sample, basis, FunctionalSpec.from_target(basis, sim.target_x), sim.psi_true


def random_sample(rng, K=12, n_lo=1, n_hi=7, d=1):
    n = rng.integers(n_lo, n_hi + 1, K)
    cell = np.repeat(np.arange(K), n)
    x = rng.normal(size=(len(cell), d))
    y = x.sum(axis=1) + rng.normal(size=len(cell))
    return GroupedSample(x, y, cell, K)
