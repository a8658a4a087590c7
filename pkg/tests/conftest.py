import math

import pytest

from trapflow.geometry import Scene
from trapflow.trapfield import FieldSpec, TrapProfile

THREE_CENTERS = [(0.25, 0.3), (0.75, 0.3), (0.5, 0.75)]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte Carlo runs (deselect with -m 'not slow')")


@pytest.fixture(scope="session")
def three_trap_scene():
    return Scene.disks(THREE_CENTERS, [0.08, 0.1, 0.09])


@pytest.fixture(scope="session")
def ladder_spec():
    scene = Scene.disks(THREE_CENTERS, [0.06, 0.08, 0.10])
    return FieldSpec(scene, tuple(TrapProfile.radial(0.5) for _ in range(3)))


@pytest.fixture(scope="session")
def mirror_scene():
    a = 0.5123
    return Scene.disks([(a - 0.2, 0.5), (a + 0.2, 0.5)], [0.08, 0.08])


@pytest.fixture(scope="session")
def single_radial():
    scene = Scene.disks([(0.5, 0.5)], [0.1])
    return FieldSpec(scene, (TrapProfile.quadratic(1.0, 0.1),))


@pytest.fixture(scope="session")
def single_tilted():
    scene = Scene.disks([(0.5, 0.5)], [0.1])
    return FieldSpec(scene, (TrapProfile.tilted((15.0,), 0.2),))


def angle_close(a, b, tol=1e-12):
    d = (a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d) <= tol


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """``record(n, passed, detail)`` prints and stores the verdict line of criterion ``n``."""

    def record(n: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
