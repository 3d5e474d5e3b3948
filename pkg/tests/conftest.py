import re

import pytest

_RESULTS: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for the acceptance criterion named in the test."""
    number = int(re.search(r"criterion_(\d+)", request.node.name).group(1))

    def record(passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _RESULTS[number] = line
        print(line)

    yield record
    if number not in _RESULTS:
        _RESULTS[number] = f"criterion {number:2d}: FAIL  raised before its check completed"


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[number])
