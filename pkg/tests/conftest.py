import numpy as np
import pytest

from regmdp.mdp import build_mdp, generate_random_mdp


def random_dense_mdp(n_s, n_a, gamma=0.9, seed=0):
    """Dense random instance with full-support rows, independent of the generator."""
    rng = np.random.default_rng(seed)
    P = rng.random((n_a, n_s, n_s)) + 0.05
    P /= P.sum(axis=2, keepdims=True)
    return build_mdp(P, rng.random((n_s, n_a)), gamma)


def random_policy(n_s, n_a, rng):
    x = rng.random((n_s, n_a)) + 0.05
    return x / x.sum(axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny():
    # 1 state, 1 action, r = 2, gamma = 0.5
    return build_mdp([[[1.0]]], [[2.0]], 0.5)


@pytest.fixture
def small_sparse():
    return generate_random_mdp(8, 3, 3, seed=4, discount=0.9)


@pytest.fixture(scope="session")
def exp1_mdp():
    return generate_random_mdp(200, 50, 20, seed=0, discount=0.99)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion and assert on it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def check(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        lines.append((number, line))
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
