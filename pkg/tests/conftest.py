import pytest

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def _report(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {name} ({detail})"
        _ACCEPTANCE[number] = line
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
