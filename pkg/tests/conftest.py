import numpy as np
import pytest

from conduct_lab.environment import GeneratorSpec, constant_environment, generate
from conduct_lab.lattice import LatticeBox

UNIFORM_1_2 = {"name": "uniform", "low": 1.0, "high": 2.0}


def iid_env(d=2, L=4, seed=0, boundary="periodic", law=None):
    spec = GeneratorSpec(kind="iid", law=law or UNIFORM_1_2, seed=seed)
    return generate(spec, LatticeBox(d, L, boundary))


def origin(box):
    return box.index(np.zeros(box.d, dtype=int))


@pytest.fixture
def unit_env():
    return constant_environment(LatticeBox(2, 4), 1.0)


@pytest.fixture
def rand_env():
    return iid_env(2, 4, seed=11)


# criterion id -> (status, seconds, detail); filled by the acceptance suite
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_RESULTS):
        status, secs, detail = ACCEPTANCE_RESULTS[cid]
        terminalreporter.write_line(f"{status} criterion {cid:2d} ({secs:.2f} s) {detail}")
