import numpy as np
import pytest

from icoconv import harness


@pytest.fixture(scope="session")
def ctx2():
    return harness.mesh_context(2)


@pytest.fixture(scope="session")
def ctx3():
    return harness.mesh_context(3)


@pytest.fixture(scope="session")
def ctx4():
    return harness.mesh_context(4)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
