import numpy as np
import pytest

from biprox.problems import double_well_suite, quadratic_suite

ACCEPTANCE_LINES = []


@pytest.fixture
def quad13():
    return quadratic_suite([1.0, 3.0], [[0.0], [4.0]])


@pytest.fixture
def dwell0():
    return double_well_suite([0.0, 0.0, 0.0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
