"""Collects one pass/fail line per acceptance criterion and prints them at the end."""

import pytest

_LINES = {}


class Acceptance:
    def record(self, key, ok, detail):
        _LINES[key] = ("PASS" if ok else "FAIL", detail)
        assert ok, f"criterion {key}: {detail}"

    def skip(self, key, reason):
        _LINES[key] = ("SKIP", reason)
        pytest.skip(reason)


@pytest.fixture
def acceptance():
    return Acceptance()


def _order(key):
    head = "".join(c for c in key if c.isdigit())
    return (int(head), key)


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_LINES, key=_order):
        status, detail = _LINES[key]
        terminalreporter.write_line(f"criterion {key:<3} {status:<4} {detail}")
