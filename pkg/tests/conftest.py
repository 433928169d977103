import numpy as np
import pytest

from otguide.core import CostMatrix, DiscreteMeasure


def uniform_pair(rng, n, m=None, d=2):
    m = n if m is None else m
    mu = DiscreteMeasure.uniform(rng.normal(size=(n, d)))
    nu = DiscreteMeasure.uniform(rng.normal(size=(m, d)))
    return mu, nu


def random_pair(rng, n, m, d=2):
    a = rng.uniform(0.1, 1.0, n)
    b = rng.uniform(0.1, 1.0, m)
    return (
        DiscreteMeasure(rng.normal(size=(n, d)), a / a.sum()),
        DiscreteMeasure(rng.normal(size=(m, d)), b / b.sum()),
    )


def sq_cost(mu, nu):
    return CostMatrix(((mu.points[:, None, :] - nu.points[None, :, :]) ** 2).sum(-1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
