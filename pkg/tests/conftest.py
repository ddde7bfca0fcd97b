import numpy as np
import pytest
from hypothesis import settings

from microcause import bench

settings.register_profile("ci", deadline=None, max_examples=25)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def suite():
    """One full standard-suite run shared by the rca, actuator and
    acceptance tests; training is the expensive part."""
    return bench.run_suite(seed=0)


@pytest.fixture(scope="session")
def chain5(suite):
    return suite.runs["chain5"]


@pytest.fixture(scope="session")
def fanout5(suite):
    return suite.runs["fanout5"]


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
