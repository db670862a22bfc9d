import numpy as np
import pytest

from boxsqp.elliptic import exponential_tracking_problem
from boxsqp.parabolic import cubic_bilinear_problem
from boxsqp.verification import make_synthetic


def smooth_direction(points, amplitude=1.0, phase=0.0):
    """A smooth field on the given points; rough random directions drown FD checks in round-off."""
    x = np.atleast_2d(points)
    return amplitude * np.prod(np.cos(np.pi * (x + phase)), axis=-1) + 0.3 * amplitude * np.sin(3 * x[:, 0] + phase)


@pytest.fixture(scope="session")
def elliptic2d():
    return exponential_tracking_problem(2, 3)


@pytest.fixture(scope="session")
def parabolic2d():
    return cubic_bilinear_problem(2, 2)


@pytest.fixture
def synthetic():
    return make_synthetic(7, 12, (0.0, 2.0), epsilon=0.3, kappa=0.5)


# PASS/FAIL lines appended by the acceptance tests
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
