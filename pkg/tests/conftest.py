from __future__ import annotations

import numpy as np
import pytest

from dymap.geometry import Intrinsics, Pose


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_pose(rng: np.random.Generator, scale: float = 2.0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-scale, scale, 3))


def rot_z(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def intr() -> Intrinsics:
    return Intrinsics(525.0, 525.0, 319.5, 239.5, 640, 480, 5000.0)


@pytest.fixture
def small_intr() -> Intrinsics:
    return Intrinsics(262.5, 262.5, 159.5, 119.5, 320, 240, 5000.0)


def box_surface(size, spacing: float = 0.01) -> np.ndarray:
    """Points on the faces of an origin-centred box, on a lattice centred on each face."""
    size = np.asarray(size, dtype=np.float64)
    pts = []
    for ax in range(3):
        a, b = [k for k in range(3) if k != ax]
        ua = np.linspace(-size[a] / 2, size[a] / 2, int(np.ceil(size[a] / spacing)) + 1)
        ub = np.linspace(-size[b] / 2, size[b] / 2, int(np.ceil(size[b] / spacing)) + 1)
        A, B = np.meshgrid(ua, ub, indexing="ij")
        for sgn in (-1, 1):
            p = np.empty((A.size, 3))
            p[:, a], p[:, b], p[:, ax] = A.ravel(), B.ravel(), sgn * size[ax] / 2
            pts.append(p)
    return np.vstack(pts)


def noisy_cuboid_cloud(rng, size, rotation, translation, noise=0.02, outliers=0.02, spacing=0.01):
    """World-frame samples of a cuboid with bounded per-axis noise and far planted outliers.

    Each point moves by up to ``noise`` times the box dimension along each box
    axis; ``outliers`` of the count are placed 1 to 3 diagonals from the centre.
    """
    size = np.asarray(size, dtype=np.float64)
    local = box_surface(size, spacing)
    local = local + rng.uniform(-noise, noise, local.shape) * size
    world = local @ np.asarray(rotation).T + translation
    k = max(1, int(round(outliers * len(world))))
    d = rng.normal(size=(k, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    far = translation + d * rng.uniform(1.0, 3.0, (k, 1)) * np.linalg.norm(size)
    return np.vstack([world, far])[rng.permutation(len(world) + k)]


def cuboid_recovery_errors(seed: int):
    """(max relative size error, yaw error in degrees) for one random cuboid.

    Footprint sides are drawn from [0.1, 0.6] m and the height below half the
    shorter side, so the height is the least-variance axis; the orientation is
    uniform on SO(3). Yaw compares the recovered length axis with the nearer
    of the true footprint axes; sizes compare l >= w ordering.
    """
    from dymap.object_param import clean_cloud, parameterize

    rng = np.random.default_rng(seed)
    l, w = rng.uniform(0.1, 0.6, 2)
    h = rng.uniform(0.15, 0.45) * min(l, w)
    R = random_rotation(rng)
    cub = parameterize(clean_cloud(noisy_cuboid_cloud(rng, (l, w, h), R, rng.uniform(-2, 2, 3))))
    truth = np.array([max(l, w), min(l, w), h])
    size_err = float(np.max(np.abs(cub.size - truth) / truth))
    v1 = cub.rotation[:, 0]
    yaw = float(np.degrees(np.arccos(min(1.0, max(abs(v1 @ R[:, 0]), abs(v1 @ R[:, 1]))))))
    return size_err, yaw


@pytest.fixture(scope="session")
def short_sequence(tmp_path_factory):
    """A 40-frame render of the default room with the walking person."""
    from dymap.synthetic import default_scene, generate_synthetic

    out = tmp_path_factory.mktemp("short_seq")
    manifest = generate_synthetic(default_scene(frames=40), 0, out)
    return out, manifest
