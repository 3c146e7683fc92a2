import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from measure_bsde import build_lattice

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_line():
    """Record a one-line verdict that is echoed in the terminal summary."""

    def record(label, passed, detail=""):
        line = f"{label} {'PASS' if passed else 'FAIL'} {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def full8():
    return build_lattice(1.0, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
