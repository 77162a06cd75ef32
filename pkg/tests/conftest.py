import numpy as np
import pytest
from hypothesis import settings

from fusion import dataset as D

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")

CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[CRITERIA] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = sorted(config.stash.get(CRITERIA, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """``criterion(n, name, passed, detail)`` logs one summary line for the run."""

    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {name}  ({detail})"
        request.config.stash[CRITERIA].append((number, line))
        print(line)
        return passed

    return record


@pytest.fixture(scope="session")
def small_dataset():
    """A dozen scripted training-split episodes."""
    return D.collect(12, "train", seed=123)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
