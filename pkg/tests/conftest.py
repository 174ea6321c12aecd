import numpy as np
import pytest

from sepba.mapgrid import GridMap
from sepba.scan import Scan
from sepba.se2 import Pose2


def smooth_image(h, w, seed=0, n_bumps=6):
    """Sum of wide Gaussian bumps in [0, 1]; smooth at the pixel scale."""
    rng = np.random.default_rng(seed)
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    img = np.zeros((h, w))
    for _ in range(n_bumps):
        cu, cv = rng.uniform(0, w), rng.uniform(0, h)
        s = rng.uniform(0.15, 0.35) * min(h, w)
        img += rng.uniform(0.2, 0.5) * np.exp(-((uu - cu) ** 2 + (vv - cv) ** 2) / (2 * s * s))
    return np.clip(img, 0.0, 1.0)


def field_map(origin, res, cols, rows, seed=0):
    """A GridMap whose intensities come from a smooth analytic field."""
    rng = np.random.default_rng(seed)
    xs = origin[0] + res * np.arange(cols)
    ys = origin[1] + res * np.arange(rows)
    X, Y = np.meshgrid(xs, ys)
    I = np.zeros_like(X)
    for _ in range(8):
        c = rng.uniform([xs[0], ys[0]], [xs[-1], ys[-1]])
        s = rng.uniform(2.0, 4.0)
        I += rng.uniform(0.2, 0.6) * np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2) / (2 * s * s))
    I = np.clip(I, 0, 1)
    return GridMap(origin, res, cols, rows, I, np.ones_like(I), np.ones(I.shape, np.int64))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_scan():
    return Scan(smooth_image(21, 25, seed=3), 0.5, timestamp_s=1.5, id=7, pose_hint=Pose2(0.3, 1.0, -2.0))


# criterion number -> (status, title, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"{status} criterion {num}: {title} ({detail})")
