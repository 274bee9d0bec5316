import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rhcrom.dynamics import FullOrderModel
from rhcrom.fem import assemble, build_mesh

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def disc3():
    return assemble(build_mesh(3))


@pytest.fixture(scope="session")
def disc5():
    return assemble(build_mesh(5))


@pytest.fixture(scope="session")
def disc7():
    """5x5 interior nodes."""
    return assemble(build_mesh(7))


@pytest.fixture(scope="session")
def fom7(disc7):
    return FullOrderModel(disc7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine(disc, amp=3.0):
    X = disc.mesh.nodes[disc.mesh.interior_dofs]
    return amp * np.sin(np.pi * X[:, 0]) * np.sin(np.pi * X[:, 1])


# acceptance summary: one line per criterion at the end of the session
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
