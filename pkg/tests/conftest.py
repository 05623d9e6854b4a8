import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fcspump.models import ProtocolConfig  # noqa: E402

ACCEPTANCE_LINES = []


@pytest.fixture
def cfg():
    return ProtocolConfig(A=4.0, R=1.0, omega=10.0)


@pytest.fixture
def report_acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(number, ok, detail):
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
