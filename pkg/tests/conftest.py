"""Collects acceptance verdict lines and replays them after the run.

Output capture would otherwise swallow the per-criterion PASS/FAIL
lines on success; the terminal-summary hook prints them where they
always survive.
"""

_VERDICTS = []


def record_verdict(line):
    _VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
