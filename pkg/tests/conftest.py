"""Shared pytest plumbing: acceptance results are collected here and printed
as one PASS/FAIL line per criterion at the end of the session."""

import pytest

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    def record(name: str, passed: bool, detail: str = "") -> None:
        _ACCEPTANCE[name] = (passed, detail)
        print(f"{name} {'PASS' if passed else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda s: (len(s.split()[1]), s)):
        ok, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
