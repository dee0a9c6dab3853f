import numpy as np
import pytest
from skimage import data

from scaled.frame import FramePlanar
from scaled.media import extract_patches


def rgb_to_yuv(img):
    """Full-range BT.601 YUV planes in [0, 1]."""
    rgb = img[..., :3].astype(np.float64) / 255
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    return FramePlanar(y, np.clip((b - y) / 1.772 + 0.5, 0, 1), np.clip((r - y) / 1.402 + 0.5, 0, 1))


@pytest.fixture(scope="session")
def natural_frames():
    imgs = [data.astronaut(), data.coffee(), data.chelsea(), data.rocket(), data.immunohistochemistry()]
    return [rgb_to_yuv(i[:256, :256]) for i in imgs]


@pytest.fixture(scope="session")
def natural_patches(natural_frames):
    return extract_patches(natural_frames, 64, 64, seed=0)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
