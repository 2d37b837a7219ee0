import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    def _report(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
