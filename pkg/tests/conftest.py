"""Shared pytest wiring.

The acceptance tests record one human-readable pass/fail line per criterion;
this hook replays them in a terminal section at the end of the run so they
are visible without ``-s``.
"""


def pytest_configure(config):
    config._criterion_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
