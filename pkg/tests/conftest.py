"""Shared fixtures and test configuration."""

import sys
from pathlib import Path

# make reference.py (the oracle helpers) importable from every test module
sys.path.insert(0, str(Path(__file__).parent))


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
