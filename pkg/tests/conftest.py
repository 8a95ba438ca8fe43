from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from forgebox.drivers import MemoryDriver, SandboxDriver

REPO = Path(__file__).resolve().parent.parent
FIXTURES = REPO / "fixtures"
PLAYBOOK = FIXTURES / "micromag.play.yaml"
GOLDEN = Path(__file__).resolve().parent / "golden"
FIXTURE_EPOCH = 1700000000


@pytest.fixture
def memory():
    return MemoryDriver()


@pytest.fixture
def sandbox(tmp_path):
    return SandboxDriver(tmp_path / "state")


@pytest.fixture
def context_copy(tmp_path):
    """A private, writable copy of the fixture build context."""
    dest = tmp_path / "context"
    shutil.copytree(FIXTURES, dest)
    return dest


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
