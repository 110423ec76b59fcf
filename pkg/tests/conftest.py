import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Independent finite-difference oracle: d f / d x by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x.copy())
        x[idx] = orig - h
        down = f(x.copy())
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_err(a, n) -> float:
    a, n = np.asarray(a), np.asarray(n)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
