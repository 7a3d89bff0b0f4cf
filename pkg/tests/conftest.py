"""Shared pytest plumbing: collects acceptance verdicts and prints them after the run."""

import pytest

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict():
    """``verdict(name, ok, detail)`` records one acceptance line and fails the test when ``ok`` is false."""

    def record(name: str, ok: bool, detail: str) -> None:
        ACCEPTANCE_RESULTS.append((name, bool(ok), detail))
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
