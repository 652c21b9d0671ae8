"""Collects the one-line acceptance verdicts and prints them at the end of the run."""

import pytest

_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_KEY] = []


def record_verdict(config, criterion: str, ok: bool, detail: str) -> None:
    config.stash[_KEY].append(f"{criterion} {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)
