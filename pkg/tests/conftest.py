import pytest

from idapbc_cpl.model import BOOST_POINT, BUCK_POINT, BOARD_PARAMS

_CRITERIA = []

OPERATING_POINTS = {
    "boost": (BOOST_POINT[0], BOOST_POINT[1][1]),
    "buck": (BUCK_POINT[0], BUCK_POINT[1][1]),
}


@pytest.fixture
def params():
    return BOARD_PARAMS


@pytest.fixture
def report_criterion():
    """Record a one-line acceptance verdict, printed in the terminal summary."""
    def record(number, passed, detail):
        _CRITERIA.append((number, passed, detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'} - {detail}")
