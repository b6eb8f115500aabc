import numpy as np
import pytest
from scipy import ndimage

from cotrack.imgcore import GrayImage


def smooth_texture(shape, seed, sigma=2.0):
    """Band-limited random texture in roughly [20, 235]."""
    rng = np.random.default_rng(seed)
    a = ndimage.gaussian_filter(rng.random(shape), sigma)
    a = (a - a.min()) / (a.max() - a.min())
    return 20.0 + 215.0 * a


def shift_image(a, dx, dy):
    """next(x, y) = a(x - dx, y - dy) by spline-free bilinear resampling."""
    h, w = a.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return ndimage.map_coordinates(a, [yy - dy, xx - dx], order=1, mode="nearest")


@pytest.fixture
def texture():
    return GrayImage(smooth_texture((256, 256), 1))


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
