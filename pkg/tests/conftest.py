import pytest

from gwspeed.offspring import OffspringLaw
from gwspeed.tree import TreeSpec

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def leafy_law():
    return OffspringLaw.from_mapping({0: 0.2, 2: 0.8})


@pytest.fixture(scope="session")
def leafless_law():
    return OffspringLaw.from_mapping({1: 0.5, 2: 0.5})


@pytest.fixture(scope="session")
def leafy(leafy_law):
    return TreeSpec.for_law(leafy_law)


@pytest.fixture(scope="session")
def leafless(leafless_law):
    return TreeSpec.for_law(leafless_law)


def dary(d: int) -> TreeSpec:
    return TreeSpec.for_law(OffspringLaw.deterministic(d), "d-ary")


def half_line() -> TreeSpec:
    return TreeSpec.for_law(OffspringLaw.deterministic(1), "half-line")
