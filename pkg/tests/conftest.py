import numpy as np
import pytest

from morphflow import kernels

_CRITERIA = []


@pytest.fixture
def criterion():
    """Record a pass/fail line for the acceptance summary."""
    def record(number, title, passed, detail=""):
        _CRITERIA.append((number, title, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_CRITERIA, key=lambda c: c[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} [{status}] {title}: {detail}")


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    previous = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
