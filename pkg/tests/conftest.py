import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_knn(points, M):
    """O(N^2) oracle: sort (distance, index) pairs explicitly."""
    points = np.asarray(points, dtype=np.float64)
    out = []
    for n in range(len(points)):
        pairs = sorted((float(np.sum((points[m] - points[n]) ** 2)), m)
                       for m in range(len(points)) if m != n)
        out.append([m for _, m in pairs[:M]])
    return np.array(out)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines):
            terminalreporter.write_line(line)
