import numpy as np
import pytest
import torch

from mvdepth.camera import Intrinsics, fixed_cuboid_rig
from mvdepth.dataset import Part, PrimitiveShape, render_views
from mvdepth.geometry import DepthMapSet

torch.set_num_threads(1)


def sphere(radius=0.5, center=(0.0, 0.0, 0.0)):
    return PrimitiveShape("sphere", (Part("sphere", tuple(center), (radius,)),))


@pytest.fixture(scope="session")
def rig8():
    return fixed_cuboid_rig(Intrinsics.default(32))


@pytest.fixture(scope="session")
def sphere_set(rig8):
    return DepthMapSet(render_views(sphere(0.5), rig8), rig8)


@pytest.fixture(scope="session")
def fine_sphere_set():
    rig = fixed_cuboid_rig(Intrinsics.default(128))
    return DepthMapSet(render_views(sphere(0.5), rig), rig)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance outcomes, filled by tests/test_acceptance.py and printed at the end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    def _record(criterion: int, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE[criterion] = (bool(passed), detail)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
