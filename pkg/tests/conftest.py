import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from demfuse import synth
from demfuse.raster import Grid

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def grid(values, cellsize=1.0, xll=0.0, yll=0.0) -> Grid:
    return Grid.from_array(np.asarray(values, dtype=float), cellsize=cellsize, xll=xll, yll=yll)


@pytest.fixture(scope="session")
def small_scene():
    """65x65 synthetic pair; fast enough for unit-level pipeline checks."""
    return synth.make_scene(65, seed=5)


@pytest.fixture(scope="session")
def medium_scene():
    return synth.make_scene(129, seed=3)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict, print it, then assert it.

    Call as ``criterion(number, title, passed, detail)``.
    """

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _CRITERIA[number] = line
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
