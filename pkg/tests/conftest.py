import numpy as np
import pytest

from l0control.domain import Grid
from l0control.objectives import PoissonTracking, QuadraticObjective


def spike_poisson(n=64, cells=(10, 30, 50), amps=(1.0, -2.0, 1.5)):
    """1-D tracking problem whose target is the state of a 3-spike control."""
    grid = Grid.uniform(1.0, n)
    truth = np.zeros(n)
    truth[list(cells)] = amps
    truth = grid.function(truth)
    y_d = PoissonTracking(grid).solve_state(truth)
    return PoissonTracking(grid, y_d), truth


def random_quadratic(n=32, seed=0):
    grid = Grid.uniform(1.0, n)
    rng = np.random.default_rng(seed)
    K = rng.standard_normal((n, n)) / np.sqrt(n)
    b = rng.standard_normal(n)
    return QuadraticObjective(grid, K, b)


@pytest.fixture(scope="session")
def spike_problem():
    return spike_poisson()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
