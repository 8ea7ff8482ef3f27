import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    """``record(number, checks)`` with ``checks`` a list of ``(label, ok)``; prints and returns the verdict."""

    def record(number: int, title: str, checks: list[tuple[str, bool]]) -> bool:
        ok = all(passed for _, passed in checks)
        failed = [label for label, passed in checks if not passed]
        detail = title if ok else f"{title}; failed: " + "; ".join(failed)
        _RESULTS[number] = (ok, detail)
        print(f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, detail = _RESULTS[number]
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")
