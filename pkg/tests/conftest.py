import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from clothrecon.geometry import Camera, build_template, grid_template

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def unit_triangle():
    return build_template([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [[0, 0], [1, 0], [0, 1]])


@pytest.fixture
def hinge():
    """Two triangles sharing the edge (1, 2)."""
    x = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]
    return build_template(x, [[0, 1, 2], [1, 3, 2]], [[0, 0], [1, 0], [0, 1], [1, 1]])


@pytest.fixture
def grid4():
    return grid_template(4, 4, 0.3)


@pytest.fixture
def front_camera():
    """64x64 camera 1 m above the xy-plane looking down at (0.15, 0.15, 0)."""
    return Camera.look_at((0.15, 0.15, 1.0), (0.15, 0.15, 0.0), (0, 1, 0), 120, 120, 64, 64)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
