import numpy as np
import pytest

from nflba.geometry import GaussianScene, Intrinsics, Pose, se3_exp


def random_scene(rng, n=5, k=None, depth=(3.0, 5.0), spread=0.6, scale=(0.15, 0.5)):
    """Small random scene in front of the identity camera."""
    means = np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
                             rng.uniform(*depth, n)])
    log_scales = np.log(rng.uniform(*scale, (n, 3)))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    colors = rng.uniform(0.1, 0.9, (n, 3))
    opac = rng.uniform(0.3, 0.9, n)
    return GaussianScene(means, log_scales, quats, colors, opac)


@pytest.fixture
def k8():
    return Intrinsics(8.0, 8.0, 4.0, 4.0, 8, 8)


@pytest.fixture
def k16():
    return Intrinsics(14.0, 14.0, 8.0, 8.0, 16, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_pose(rng, mag=0.02):
    return se3_exp(rng.normal(size=6) * mag)


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
