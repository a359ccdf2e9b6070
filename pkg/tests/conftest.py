import numpy as np
import pytest

from collabrl.mdp import TabularMDP

# lines printed after the run by the acceptance suite
ACCEPTANCE_LINES: list[str] = []


def random_mdp(S: int, A: int, H: int, seed: int = 0, alpha: float = 1.0) -> TabularMDP:
    g = np.random.default_rng(seed)
    P = g.dirichlet(np.full(S, alpha), size=(max(H - 1, 0), S * A)).reshape(max(H - 1, 0), S * A, S)
    init = g.dirichlet(np.ones(S))
    return TabularMDP(S, A, H, P, init)


def random_kernels(S: int, A: int, H: int, g: np.random.Generator) -> np.ndarray:
    return g.dirichlet(np.ones(A), size=(H, S))


def chain_mdp() -> TabularMDP:
    """Two states, two actions: action 0 moves to state 1, action 1 stays."""
    P = np.zeros((1, 4, 2))
    P[0, 0 * 2 + 0, 1] = 1.0
    P[0, 0 * 2 + 1, 0] = 1.0
    P[0, 1 * 2 + 0, 1] = 1.0
    P[0, 1 * 2 + 1, 1] = 1.0
    return TabularMDP(2, 2, 2, P, np.array([1.0, 0.0]))


@pytest.fixture
def small_mdp():
    return random_mdp(4, 3, 3, seed=7)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
