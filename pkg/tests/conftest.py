from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stranglerkit import io, planner  # noqa: E402


@pytest.fixture(scope="session")
def fig3():
    return io.load_model(io.bundled("fig3.model"))


@pytest.fixture(scope="session")
def fig3_trace(fig3):
    return io.load_trace(io.bundled("fig3.trace.json"), fig3)


@pytest.fixture(scope="session")
def fig3_plan(fig3):
    return planner.generate_plan(fig3, "A")


@pytest.fixture(scope="session")
def fig3_migrated(fig3, fig3_plan):
    migration = planner.Migration(fig3)
    for step in fig3_plan:
        migration.apply(step)
    return migration.model


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
