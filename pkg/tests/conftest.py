import sys
from pathlib import Path

import pytest

from regdem.isa import parse_kernel

TESTS = Path(__file__).parent
FIXTURES = TESTS / "fixtures"
sys.path.insert(0, str(TESTS))


def load(name):
    return parse_kernel((FIXTURES / f"{name}.sass").read_text())


@pytest.fixture
def fixture_kernel():
    return load


# acceptance criterion -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (passed, detail)
    print(f"acceptance {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
