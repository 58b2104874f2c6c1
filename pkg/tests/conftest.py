"""
Shared Test Fixtures
====================

Hypothesis profiles, the ``--acceptance`` switch for desk-scale runs, and small
geometry/operator fixtures reused across modules.
"""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from imre.forge import make_base_geometry, mechanistic_operator

settings.register_profile("default", max_examples=50, deadline=None)
settings.register_profile(
    "ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def pytest_addoption(parser):
    parser.addoption(
        "--acceptance",
        action="store_true",
        default=False,
        help="run desk-scale acceptance experiments",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--acceptance"):
        return
    skip = pytest.mark.skip(reason="desk-scale run; pass --acceptance to enable")
    for item in items:
        if "acceptance" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def small_geometry():
    """Source (24 nodes) and sensor (16 nodes) meshes."""
    return make_base_geometry(24, 16, seed=3)


@pytest.fixture(scope="session")
def small_operator(small_geometry):
    return mechanistic_operator(*small_geometry)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
