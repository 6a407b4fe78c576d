import numpy as np
import pytest

from splat4d.camera import CameraIntrinsics, OrbitRig, orbit_poses


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_camera():
    intr = CameraIntrinsics.from_fov(32, 32)
    pose = orbit_poses(OrbitRig(n_azimuths=8, radius=2.0))[1]
    return pose, intr


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report(capsys):
    """Record one PASS/FAIL line per acceptance criterion; echoed live and in the run summary."""
    def report(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number} [{title}]: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
