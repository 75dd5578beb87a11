import numpy as np
import pytest

from ddpnet import netgraph

# lines registered by the acceptance suite, echoed in the terminal summary
CRITERIA_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(12345))


@pytest.fixture
def chain():
    return netgraph.NetworkTopology(
        [("x", "input"), ("h", "internal"), ("y", "output")], [("x", "h"), ("h", "y")]
    )


@pytest.fixture
def net2221():
    return netgraph.layered([2, 2, 2, 1])
