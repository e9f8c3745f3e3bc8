import pytest

from atomforest import library as lb
from atomforest.expr import DEFAULT_GRID


@pytest.fixture(scope="session")
def lib_depth1():
    return lb.build_library(DEFAULT_GRID, lb.BuildConfig(d_max=1))


@pytest.fixture(scope="session")
def lib_depth2():
    return lb.build_library(DEFAULT_GRID, lb.BuildConfig(d_max=2))
