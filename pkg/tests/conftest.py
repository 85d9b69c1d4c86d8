import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flockctl.ensemble import EnsembleState, SimParams

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def params():
    return SimParams()


def make_state(rng, N, d, vbox=(0.0, 1.0), xbox=(0.0, 1.0)):
    return EnsembleState(rng.uniform(*xbox, size=(N, d)), rng.uniform(*vbox, size=(N, d)))


TEST1_SEEDS = tuple(range(10))


@pytest.fixture(scope="session")
def test1_states():
    """Ten reference-scale initial states with ``s`` uniform in ``[0, 1]^(2dN)``."""
    from flockctl.ensemble import random_state
    return [random_state(np.random.default_rng(s), 50, 2, (0.0, 1.0), (0.0, 1.0)) for s in TEST1_SEEDS]


@pytest.fixture(scope="session")
def test1_pmp(test1_states):
    from flockctl.pmp import solve_pmp
    return [solve_pmp(s, SimParams()) for s in test1_states]


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` records one acceptance line and returns ``ok``."""
    def record(k, ok, detail):
        ACCEPTANCE_LINES.append((k, f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
