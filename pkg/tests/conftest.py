import pytest

from pole.datasets import load_iris
from pole.fe import group_gen


@pytest.fixture(scope="session")
def group32():
    return group_gen(32, seed=7)


@pytest.fixture(scope="session")
def group16():
    return group_gen(16, seed=3)


@pytest.fixture(scope="session")
def iris():
    return load_iris()


# -- acceptance reporting: one pass/fail line per criterion in the terminal summary

_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    lines = request.config.stash.setdefault(_CRITERIA, {})
    seen = []

    def record(number: int, ok: bool, detail: str) -> bool:
        lines[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        seen.append(number)
        return ok

    yield record
    if not seen:
        number = int(request.node.name.split("_")[1])
        lines[number] = f"criterion {number}: FAIL  {request.node.name} raised before reporting"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
