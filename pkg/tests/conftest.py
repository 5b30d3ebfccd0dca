import re

import numpy as np
import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def report():
    """``report(n, ok, detail)`` records one acceptance line and prints it."""
    def emit(number, ok, detail):
        line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(re.match(r"\d+", l.split()[1]).group())):
            terminalreporter.write_line(line)
