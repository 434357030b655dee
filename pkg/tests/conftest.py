import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, d, cond_floor=0.5):
    A = rng.standard_normal((d, d))
    return A @ A.T + cond_floor * np.eye(d)


ACCEPTANCE_LINES = []


def record(criterion, name, passed, detail):
    """Log one acceptance verdict; all verdicts are printed in the terminal summary."""
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
