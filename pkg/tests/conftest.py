import numpy as np
import pytest

from softcompose.gridworld import GridTask, build_library, random_grid, random_items
from softcompose.mdp import TabularMdp, uniform_policy

TASK_SETS = (
    ("Purple", "Blue"),
    ("BeigeSquare", "PurpleCircle"),
    ("Blue", "Square", "Circle"),
)


def seeded_library(seed: int, tau: float = 1.0, size: int | None = None):
    """A reproducible gridworld library: grid 4x4 to 10x10, 2-3 tasks."""
    rng = np.random.default_rng(seed)
    size = size or int(rng.integers(4, 11))
    grid = random_grid(size, size, seed)
    items = random_items(grid, seed)
    names = TASK_SETS[seed % len(TASK_SETS)]
    lib = build_library(grid, items, [GridTask.parse(n) for n in names], tau)
    return grid, items, lib


def random_stochastic_mdp(seed: int, n: int = 8, n_actions: int = 3) -> TabularMdp:
    """Random dense dynamics that leak to the virtual goal from every action."""
    rng = np.random.default_rng(seed)
    p = rng.random((n, n_actions, n))
    p[..., -1] += 0.3 * p.sum(axis=2)
    p /= p.sum(axis=2, keepdims=True)
    p[-1] = 0.0
    p[-1, :, -1] = 1.0
    r = -rng.random((n, n_actions))
    r[-1] = 0.0
    return TabularMdp.from_dense(p, r, np.zeros(n, bool), n - 1)


@pytest.fixture
def two_state():
    from softcompose.mdp import two_state_mdp

    return two_state_mdp(), uniform_policy(2, 2)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
