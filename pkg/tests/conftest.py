import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _fd_relative_error(f, weights, grads, rng, n_coords=40, eps=1e-6, floor=1e-6):
    """Worst relative error of ``grads`` against central differences of ``f``
    at ``n_coords`` random weight coordinates."""
    names = sorted(weights)
    sizes = np.array([max(1, np.size(weights[n])) for n in names], dtype=float)
    worst = 0.0
    for _ in range(n_coords):
        k = names[int(rng.choice(len(names), p=np.sqrt(sizes) / np.sqrt(sizes).sum()))]
        idx = tuple(int(rng.integers(n)) for n in np.shape(weights[k]))
        wp = {n: np.array(v) for n, v in weights.items()}
        wm = {n: np.array(v) for n, v in weights.items()}
        wp[k][idx] += eps
        wm[k][idx] -= eps
        fd = (f(wp) - f(wm)) / (2 * eps)
        worst = max(worst, abs(float(grads[k][idx]) - fd) / max(abs(fd), floor))
    return worst


@pytest.fixture
def fd_check():
    return _fd_relative_error


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
