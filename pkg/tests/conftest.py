from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import _instances as inst  # noqa: E402

@pytest.fixture
def bin1():
    return inst.bin1()


@pytest.fixture
def bin2():
    return inst.bin2()


@pytest.fixture
def one_sided():
    return inst.one_sided()


@pytest.fixture
def flat_tree():
    return inst.flat_tree()


def pytest_terminal_summary(terminalreporter):
    lines = inst.ACCEPTANCE_LINES
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(lines):
        terminalreporter.write_line(lines[k])
