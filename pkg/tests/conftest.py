import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    def _record(criterion: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[criterion] = (bool(passed), detail)
        return bool(passed)

    return _record


def format_acceptance() -> list[str]:
    return [
        f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        for k, (ok, detail) in sorted(ACCEPTANCE.items())
    ]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in format_acceptance():
            terminalreporter.write_line(line)
