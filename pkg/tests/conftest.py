"""Shared test configuration.

Collects one summary line per acceptance criterion and prints them at the
end of the run, so the suite output ends with an explicit PASS/FAIL verdict
for each criterion, with the measured numbers next to it.
"""

from __future__ import annotations

import re

import pytest

# criterion id -> detail line recorded by the acceptance tests themselves
_DETAILS: dict[str, str] = {}
# criterion id -> list of per-test outcomes ("passed"/"failed"/"skipped")
_OUTCOMES: dict[str, list[str]] = {}

_CRITERION_RE = re.compile(r"test_acceptance\.py::test_(a\d+)")


@pytest.fixture
def record_criterion():
    """Callable for acceptance tests: record_criterion("A3", "gap 0.16 ...").

    Call it before asserting, so a failing criterion still reports its
    measured values in the final summary.
    """

    def _record(criterion: str, detail: str) -> None:
        prev = _DETAILS.get(criterion)
        _DETAILS[criterion] = f"{prev}; {detail}" if prev else detail

    return _record


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    match = _CRITERION_RE.search(report.nodeid)
    if match:
        _OUTCOMES.setdefault(match.group(1).upper(), []).append(report.outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _OUTCOMES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for criterion in sorted(_OUTCOMES):
        outcomes = _OUTCOMES[criterion]
        if any(o == "failed" for o in outcomes):
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        detail = _DETAILS.get(criterion, "")
        line = f"{criterion} {verdict}"
        if detail:
            line += f"  {detail}"
        terminalreporter.write_line(line)
