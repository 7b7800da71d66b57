import numpy as np
import pytest

from viewprop.scene import (CameraIntrinsics, CameraRing, DatasetManifest, Plane, RigidPose, SyntheticSceneSpec,
                            ViewRecord, gen_synthetic, preset)


@pytest.fixture(scope="session")
def plane_ring():
    return gen_synthetic(preset("plane-ring", 20, 128), seed=7)


@pytest.fixture(scope="session")
def sphere_scene():
    spec = preset("sphere-over-plane", 20, 128)
    return spec, gen_synthetic(spec, seed=7)


@pytest.fixture(scope="session")
def small_ring():
    """Eight 48-pixel views of the checkered plane; cheap enough for pipeline round trips."""
    return gen_synthetic(preset("plane-ring", 8, 48), seed=3)


@pytest.fixture
def flat_scene():
    """Untextured plane under a directional light: every view is one constant color."""
    ring = CameraRing(count=6, radius=1.0, height=3.0, resolution=32)
    spec = SyntheticSceneSpec([Plane(color_a=(0.4, 0.5, 0.6), color_b=(0.4, 0.5, 0.6))], camera_ring=ring)
    return gen_synthetic(spec, seed=1)


def make_view(vid=0, size=(16, 16), depth=2.0, color=(0.5, 0.5, 0.5), pose=None, fov=60.0):
    H, W = size
    intr = CameraIntrinsics.from_fov(W, H, fov)
    image = np.broadcast_to(np.asarray(color, float), (H, W, 3)).copy()
    d = np.full((H, W), float(depth)) if np.isscalar(depth) else np.asarray(depth, float)
    return ViewRecord(vid, intr, pose or RigidPose.identity(), image, d)


@pytest.fixture
def view_factory():
    return make_view


def as_manifest(views):
    return DatasetManifest(list(views))


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(number, ok, detail)``; shown in the terminal summary."""

    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
