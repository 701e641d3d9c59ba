import numpy as np
import pytest

from brickforge.bricks import BrickPose, Geometry

_ACCEPTANCE = {}


@pytest.fixture
def geom():
    return Geometry(32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cycle_poses():
    """Six bricks: b1, b2 on top of the root, b3 above and b4 below b1, b5 above b2.

    b3 also sits on b2, which gives one cycle-closing (non-tree) edge.
    """
    return [
        BrickPose(16, 16, 16, 0),
        BrickPose(15, 16, 17, 0),
        BrickPose(17, 16, 17, 0),
        BrickPose(16, 16, 18, 0),
        BrickPose(14, 16, 16, 0),
        BrickPose(18, 16, 18, 0),
    ]


@pytest.fixture
def acceptance():
    def report(number, passed, detail):
        _ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
