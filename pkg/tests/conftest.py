import numpy as np
import pytest

from pinco.cases import load_fixture
from pinco.grid import split_generators, to_per_unit

FIXTURE_NAMES = ["ieee9", "ieee24", "ieee30", "ieee118"]


@pytest.fixture(scope="session")
def cases():
    return {name: load_fixture(name) for name in FIXTURE_NAMES}


@pytest.fixture(scope="session")
def ncases(cases):
    return {name: to_per_unit(c) for name, c in cases.items()}


@pytest.fixture(scope="session")
def ieee9(ncases):
    return ncases["ieee9"]


@pytest.fixture(scope="session")
def ieee9_graph(ieee9):
    return split_generators(ieee9, policy="per-gen")


def random_state(ncase, rng):
    """A random but reasonably scaled decision state for physics tests."""
    from pinco.physics import DecisionState

    n_gen = len(ncase.active_gens)
    n_bus = ncase.n_bus
    return DecisionState(
        rng.uniform(-1, 3, n_gen),
        rng.uniform(-2, 2, n_gen),
        rng.uniform(0.9, 1.1, n_bus),
        rng.uniform(-0.4, 0.4, n_bus),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
