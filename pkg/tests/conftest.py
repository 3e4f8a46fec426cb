import numpy as np
import pytest

from evstereo.geometry import CameraIntrinsics, Pose, StereoRig, so3_exp


def random_pose(rng, angle=0.3, trans=1.0, stamp=0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose(so3_exp(axis * rng.uniform(0, angle)), rng.uniform(-trans, trans, 3), stamp)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_rig():
    return StereoRig.ideal(f=100.0, width=64, height=48, baseline=0.1)


@pytest.fixture(scope="session")
def distorted_rig():
    left = CameraIntrinsics(220.0, 218.0, 170.0, 128.0, 346, 260, (-0.2, 0.03, 0.001, -0.0005))
    right = CameraIntrinsics(222.0, 221.0, 175.0, 131.0, 346, 260, (-0.18, 0.02))
    ext = Pose(so3_exp([0.01, -0.02, 0.005]), [-0.1, 0.002, 0.001])
    return StereoRig(left, right, ext)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"[{status}] {name}: {detail}")
