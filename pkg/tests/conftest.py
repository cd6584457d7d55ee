import numpy as np
import pytest

from fcan.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(autouse=True)
def _numpy_errors():
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        yield


@pytest.fixture(scope="session")
def acceptance(request):
    """Collects one (criterion, passed, detail) line per acceptance check."""
    lines = request.config.__dict__.setdefault("_fcan_acceptance", [])

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_fcan_acceptance")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
