import numpy as np
import pytest

from voxdiff.camera import Intrinsics, default_intrinsics, sample_spherical_poses
from voxdiff.voxgrid import VoxelGrid


def random_grid(rng, R, density_scale=1.5, density_shift=0.0):
    data = np.empty((R, R, R, 4))
    data[..., 0] = rng.normal(density_shift, density_scale, (R, R, R))
    data[..., 1:] = rng.normal(0.0, 1.0, (R, R, R, 3))
    return VoxelGrid(data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_intr():
    return Intrinsics(8, 8, default_intrinsics(8).focal)


@pytest.fixture
def one_pose():
    return sample_spherical_poses(1, 4.0, seed=5)[0]


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    def report(number, name, ok, detail, seconds, budget):
        within = seconds < budget
        status = "PASS" if ok and within else "FAIL"
        line = f"criterion {number} [{status}] {name}: {detail}; {seconds:.1f}s (budget {budget:.0f}s)"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
        assert within, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
