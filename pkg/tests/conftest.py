from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from consensusjm import ModelSpec, default_params, simulate_dataset  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    """Store a one-line verdict; all verdicts are echoed in the terminal summary."""
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_sim():
    return simulate_dataset(default_params(), 40, 11)


@pytest.fixture(scope="session")
def small_data(small_sim):
    return small_sim[0]


@pytest.fixture(scope="session")
def weibull_spec():
    return ModelSpec(baseline="weibull")
