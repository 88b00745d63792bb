import numpy as np
import pytest

from d2t.geometry import Pose
from d2t.pipeline.synthetic import SyntheticSceneSpec, generate


def random_pose(rng, angle=np.pi, trans=1.0) -> Pose:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return Pose.from_rotvec(axis * rng.uniform(-angle, angle), rng.uniform(-trans, trans, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def box_scene():
    return generate(SyntheticSceneSpec(kind="box", n_views=3, width=64, height=48), seed=0)


@pytest.fixture(scope="session")
def plane_scene():
    return generate(SyntheticSceneSpec(kind="plane", n_views=3, width=64, height=48), seed=0)


# one line per acceptance criterion, printed after the test summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
