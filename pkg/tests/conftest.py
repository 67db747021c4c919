import numpy as np
import pytest

from twistray.geometry import flat_annulus
from twistray.lambdafield import from_expression

CURVED_PHI = "0.1*(x^2 + y^2)"
CURVED_LAMBDA = "0.4 + 0.3*cos(theta) + 0.2*x*sin(2*theta)"


@pytest.fixture(scope="session")
def flat():
    return flat_annulus()


@pytest.fixture(scope="session")
def curved():
    return flat_annulus(phi=CURVED_PHI)


@pytest.fixture(scope="session")
def lam0():
    return from_expression("0")


@pytest.fixture(scope="session")
def lam_curved():
    return from_expression(CURVED_LAMBDA)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record a criterion line; printed at the end of the session."""

    def add(line: str):
        ACCEPTANCE_LINES.append(line)
        print(line)

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
