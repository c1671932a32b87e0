import numpy as np
import pytest

from fedaria.numkit import RngStream


def central_difference(f, x, h=1e-5, order=2):
    """Gradient of scalar f at x by central differences, one coordinate at a time.

    ``order=4`` uses the five-point stencil, which allows a larger h and so
    less round-off on small gradient entries.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        if order == 2:
            g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
        else:
            g.flat[i] = (8 * (f(x + e) - f(x - e)) - (f(x + 2 * e) - f(x - 2 * e))) / (12 * h)
    return g


def rel_error(a, b, floor=1e-5):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)


@pytest.fixture
def rng():
    return RngStream(1234)


# Acceptance criteria report: test_acceptance records one verdict per
# criterion; the terminal summary prints them in criterion order.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
