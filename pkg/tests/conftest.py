import sys
from importlib.resources import files
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from ecw import integrals_io as io  # noqa: E402

settings.register_profile("ecw", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ecw")

DATA = files("ecw.data")


def _load(stem):
    ham = io.read_fcidump(DATA / f"{stem}.fcidump")
    props = io.load_properties(DATA / f"{stem}.properties.json", ham.n_spin_orbitals)
    return ham, props


@pytest.fixture(scope="session")
def h2():
    return _load("h2_sto3g")


@pytest.fixture(scope="session")
def heh():
    return _load("heh_sto3g")


@pytest.fixture(scope="session")
def h4():
    return _load("h4_sto3g")


@pytest.fixture(scope="session")
def h6():
    return _load("h6_sto3g")
