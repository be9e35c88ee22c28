import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flowlab import AtomCloud

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def two_atoms():
    return AtomCloud(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]))


@pytest.fixture
def skewed_cloud():
    return AtomCloud(np.array([[-0.5], [1.0], [1.7]]), np.array([0.2, 0.5, 0.3]))


@pytest.fixture
def planar_cloud():
    return AtomCloud(np.array([[-1.0, 0.5], [0.8, 0.3], [0.1, -1.2]]), np.array([0.3, 0.3, 0.4]))
