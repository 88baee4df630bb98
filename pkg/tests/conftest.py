import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

# numba compiles on first call, so per-example deadlines are meaningless
settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

from v2v_oe.channel import LinkBudget  # noqa: E402
from v2v_oe.scenario import ScenarioConfig  # noqa: E402


@pytest.fixture
def cfg():
    return ScenarioConfig(num_pairs=28, pair_distance=26.0, arrival_rate=6.0, max_queue=5)


@pytest.fixture
def budget(cfg):
    return LinkBudget(cfg)


@pytest.fixture(scope="session")
def g_example():
    # link gain at 26 m with unit fading
    return 7.45e-10


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report():
    """Record the one-line verdict of an acceptance criterion."""
    def record(number: int, passed: bool, detail: str):
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[number])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
