import numpy as np
import pytest

from kilnscope.geo import GeoTransform
from kilnscope.raster import RasterGrid


@pytest.fixture
def transform():
    return GeoTransform(74.0, 31.5, 0.001, -0.001)


def grid(values, transform=None, nodata=None):
    """2-d or 3-d array -> RasterGrid on a default transform."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    return RasterGrid(arr, transform or GeoTransform(74.0, 31.5, 0.001, -0.001), nodata)


ACCEPTANCE_LINES: list = []


def verdict(name: str, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then fail the test if needed."""
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
