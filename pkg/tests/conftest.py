import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rel_rms(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.sqrt(((a - b) ** 2).sum() / (b ** 2).sum()))


ACCEPTANCE = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line; the terminal summary prints them all."""
    def record(number, name, passed, detail):
        ACCEPTANCE.append((number, name, passed, detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE, key=lambda r: (r[0], r[1])):
        status = {True: "PASS", False: "FAIL"}.get(passed, passed)
        terminalreporter.write_line(f"[{status}] {number}. {name}: {detail}")
