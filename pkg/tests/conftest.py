import numpy as np
import pytest

from ispalm.linalg import BlockVec
from ispalm.quadratic import QuadraticProblem, random_quadratic


@pytest.fixture
def small_quadratic():
    """n=4 finite sum over two blocks, with several rows per sample."""
    return random_quadratic(np.random.default_rng(11), 4, [2, 3], rows=2)


def random_point(problem, seed=0):
    gen = np.random.default_rng(seed)
    return BlockVec([n for n, _ in problem.block_specs], [gen.standard_normal(s) for _, s in problem.block_specs])


def scalar_sum(a):
    """h_i(x) = (x - a_i)^2 / 2 in one dimension."""
    a = np.asarray(a, dtype=float)
    return QuadraticProblem(np.ones((len(a), 1, 1)), a[:, None], [1])


# Acceptance verdicts collected by tests/test_acceptance.py and echoed in the
# terminal summary, so they show up without ``-s``.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
