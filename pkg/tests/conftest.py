import numpy as np
import pytest

from stmesh import body


@pytest.fixture(scope="session")
def small_template():
    # small vertex budget keeps body-model forwards cheap in tests
    return body.build_default_template(num_vertices=140, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(np.random.PCG64(0))
