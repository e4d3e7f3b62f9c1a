import numpy as np
import pytest

from costmatch.model import DynParams, equilibrium_input, standing_state

PHASES = [(True, True), (True, False), (False, True)]


def random_state(rng, momentum=3.0, tilt=0.2):
    x = standing_state(0.75, 0.08)
    x[0:6] += rng.normal(0, momentum, 6)
    x[6:9] += rng.normal(0, 0.02, 3)
    x[9:12] += rng.normal(0, tilt, 3)
    x[12:18] += rng.normal(0, 0.02, 6)
    return x


def random_input(rng, phase, dyn=None, spread=30.0):
    dyn = dyn or DynParams()
    u = equilibrium_input(dyn, phase)
    u[:12] += rng.normal(0, spread, 12)
    u[12:] = rng.normal(0, 0.5, 6)
    return u


def max_rel(a, b):
    """Normwise relative difference ``max|a - b| / max(max|b|, tiny)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# (criterion number, line) pairs filled in by test_acceptance, echoed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
