import numpy as np
import pytest

from rbfsolver.basis import NodeSet
from rbfsolver.schedule import CosineVP, LinearLogSNR, TabulatedSchedule


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def paper_nodes():
    """Three nodes 0, -0.1, -0.2 with the step [0, 0.1]."""
    return NodeSet([0.0, -0.1, -0.2], 0.1), 0.0, 0.1


def _table():
    t = np.linspace(0.01, 1.0, 40)
    return TabulatedSchedule(t, 4.0 - 8.0 * t ** 1.3)


@pytest.fixture(params=["linear", "cosine", "table"])
def schedule(request):
    return {"linear": LinearLogSNR(), "cosine": CosineVP(), "table": _table()}[request.param]


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL line for the acceptance summary."""
    def record(number, name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
