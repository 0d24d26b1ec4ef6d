"""Shared pytest hooks: the acceptance summary printed at the end of a run."""

import pytest

_RESULTS = {}


class AcceptanceLog:
    """Record sub-checks of one acceptance criterion.

    Checks are recorded before they are asserted so that a failing criterion
    still shows every measured value in the terminal summary.
    """

    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.checks = []

    def check(self, name, ok, detail=""):
        self.checks.append((name, bool(ok), detail))
        return bool(ok)

    @property
    def passed(self):
        return bool(self.checks) and all(ok for _, ok, _ in self.checks)



class _TestChecks:
    """One test's view of a criterion log; asserts only its own checks."""

    def __init__(self, log):
        self.log = log
        self.own = []

    def check(self, name, ok, detail=""):
        self.own.append((name, bool(ok), detail))
        return self.log.check(name, ok, detail)

    def assert_all(self):
        failed = [f"{n} ({d})" for n, ok, d in self.own if not ok]
        assert not failed, "; ".join(failed)


def acceptance_log(number, title):
    """Checks for criterion ``number``; tests of the same criterion share one summary line."""
    if number not in _RESULTS:
        _RESULTS[number] = AcceptanceLog(number, title)
    return _TestChecks(_RESULTS[number])


@pytest.fixture
def acceptance():
    return acceptance_log


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        log = _RESULTS[number]
        status = "PASS" if log.passed else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {number:>2}: {status}  {log.title}")
        for name, ok, detail in log.checks:
            mark = "ok  " if ok else "FAIL"
            terminalreporter.write_line(f"    [{mark}] {name}: {detail}")
