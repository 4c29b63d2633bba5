import numpy as np
import pytest

from hidg.dgspace import DGSpace
from hidg.mesh import build_uniform_triangulation


@pytest.fixture(scope="session")
def spaces():
    """DG spaces keyed by (n, p), built lazily and shared across tests."""
    cache = {}

    def get(n, p):
        if (n, p) not in cache:
            cache[(n, p)] = DGSpace(build_uniform_triangulation(n), p)
        return cache[(n, p)]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion."""

    def record(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
