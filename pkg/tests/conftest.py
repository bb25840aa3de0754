import numpy as np
import pytest

from nanoarray.gas import GasEnvironment
from nanoarray.optics import EllipsoidGeometry, TrapArray, make_site

RADIUS = 85e-9  # 170 nm diameter


@pytest.fixture
def sphere():
    return EllipsoidGeometry.sphere(RADIUS)


@pytest.fixture
def spheroid():
    return EllipsoidGeometry.spheroid(RADIUS, 1.5)


@pytest.fixture
def single():
    return TrapArray.grid(1, 1)


@pytest.fixture
def grid3():
    return TrapArray.grid(3, 3)


@pytest.fixture
def weightless():
    """One linear_x site with gravity switched off."""
    return make_site((0.0, 0.0, 0.0), 0.2).as_array(gravity=0.0)


@pytest.fixture
def env():
    return GasEnvironment(2000.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scenario_run(tmp_path_factory):
    """Run a bundled scenario once per session; later requests reuse the tree."""
    from nanoarray.scenarios import run_scenario

    cache = {}

    def run(name, workers=4):
        if name not in cache:
            cache[name] = run_scenario(name, tmp_path_factory.mktemp(name), workers=workers)
        return cache[name]

    return run
