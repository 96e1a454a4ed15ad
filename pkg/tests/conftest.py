import pytest

import smora
from smora.training import default_suite


@pytest.fixture(scope="session")
def suite():
    """The default 8-task heterogeneous suite, shared across training tests."""
    return default_suite(seed=0)


@pytest.fixture()
def rng():
    return smora.make_rng(12345)
