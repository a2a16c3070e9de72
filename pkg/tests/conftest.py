import numpy as np
import pytest

from kifmm3d.expansion import ExpansionOperators


def uniform_points(n, seed=0, lo=0.0, hi=1.0):
    rng = np.random.default_rng(seed)
    return lo + rng.random((n, 3)) * (hi - lo)


@pytest.fixture(scope="session")
def ops33():
    return ExpansionOperators(3, 3)


@pytest.fixture(scope="session")
def ops44():
    return ExpansionOperators(4, 4)


@pytest.fixture(scope="session")
def ops66():
    return ExpansionOperators(6, 6)
