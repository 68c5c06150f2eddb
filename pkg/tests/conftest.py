import numpy as np
import pytest

from ccdiam.calibration import build_calibration
from ccdiam.structures import builtin

# filled by test_acceptance, printed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def heis():
    return builtin("heisenberg")


@pytest.fixture(scope="session")
def heis_cf(heis):
    return build_calibration(heis, np.zeros(3), 1.0)


@pytest.fixture(scope="session")
def eucl_cf():
    return build_calibration(builtin("euclidean2"), np.zeros(2), 1.0)
