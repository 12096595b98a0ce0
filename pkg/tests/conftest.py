import numpy as np
import pytest

from pstgcn.graph import SkeletonTopology


def numeric_grad(f, arr, h=1e-5):
    """Central differences of the scalar ``f()`` with respect to ``arr``, in place."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        plus = f()
        arr[i] = old - h
        minus = f()
        arr[i] = old
        grad[i] = (plus - minus) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    """Largest absolute difference relative to the larger gradient magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-300)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def chain_topology(V, center=0):
    edges = [(i, i + 1) for i in range(V - 1)]
    return SkeletonTopology(V, edges, center, {i + 1: i for i in range(V - 1)}, name=f"chain{V}")


@pytest.fixture
def topo5():
    # a small tree: 0-1-2-3 with 4 hanging off 1
    return SkeletonTopology(5, [(0, 1), (1, 2), (2, 3), (1, 4)], 1, {1: 0, 2: 1, 3: 2, 4: 1}, name="tree5")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one "ACCEPTANCE n PASS|FAIL" line per criterion, repeated in the run summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
