import numpy as np
import pytest

from matchboot.data import Dataset


@pytest.fixture
def four_unit():
    # treated at x = 0.0, 1.0; controls at 0.2, 0.9
    return Dataset([[0.0], [1.0], [0.2], [0.9]], [1, 1, 0, 0], [3.0, 5.0, 1.0, 2.0])


def random_dataset(rng, n, d, min_group=1):
    while True:
        x = rng.uniform(size=(n, d))
        D = (rng.uniform(size=n) < 0.5).astype(int)
        if min(D.sum(), n - D.sum()) >= min_group:
            break
    y = x.sum(axis=1) + rng.normal(size=n) + 2 * D
    return Dataset(x, D, y)


def brute_matches(x, D, m):
    """Quadratic reference: per unit, the m nearest opposite-group units by (distance, index)."""
    n = len(D)
    out = []
    for i in range(n):
        cand = []
        for j in range(n):
            if D[j] != D[i]:
                s = 0.0
                for k in range(x.shape[1]):
                    s += (x[j, k] - x[i, k]) ** 2
                cand.append((s, j))
        cand.sort()
        out.append([j for _, j in cand[:m]])
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20241014)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
