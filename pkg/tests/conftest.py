import os

import numpy as np
import pytest

from robustq.model import derive, figure1_model, load_model
from robustq.rsdg import solve_value

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def config_path(name):
    return os.path.abspath(os.path.join(CONFIGS, name))


@pytest.fixture(scope="session")
def fig1_spec():
    return figure1_model()


@pytest.fixture(scope="session")
def fig1_derived(fig1_spec):
    return derive(fig1_spec)


@pytest.fixture(scope="session")
def fig1_vf(fig1_derived):
    return solve_value(fig1_derived)


@pytest.fixture(scope="session")
def exp_spec():
    return load_model(config_path("experiment.ini"))


@pytest.fixture(scope="session")
def exp_derived(exp_spec):
    return derive(exp_spec)


@pytest.fixture(scope="session")
def exp_vf(exp_derived):
    return solve_value(exp_derived)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


# one line per acceptance criterion, printed in the terminal summary
_CRITERIA = {}


@pytest.fixture
def criterion():
    def record(number, ok, detail=""):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
