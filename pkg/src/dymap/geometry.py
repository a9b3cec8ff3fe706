"""Poses, camera intrinsics, point clouds and Hessian-form planes.

Conventions used throughout the package:

* ``Pose`` stores the world-to-camera transform ``p_c = R_cw @ p_w + t_cw``.
* Camera frame is x right, y down, z forward (pinhole, rectified images).
* Depth images are either raw sensor units (integer dtype, divided by
  ``Intrinsics.depth_scale``) or metric float arrays in meters.
* A plane ``(n, d)`` holds points with ``n . p + d = 0`` and ``|n| = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEPTH_MIN = 0.1
DEPTH_MAX = 8.0


class InputError(ValueError):
    """Raised when an operation receives malformed input."""


class DegenerateInputError(ValueError):
    """Raised when geometry is too degenerate for the requested fit."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation).reshape(3, 3)
        t = _frozen(self.translation).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise InputError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InputError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def camera_center(self) -> np.ndarray:
        """Camera optical center in world coordinates."""
        return -self.rotation.T @ self.translation

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self * other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map world points into the camera frame."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return p @ self.rotation.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame points into the world frame."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return (p - self.translation) @ self.rotation

    def rotation_angle_to(self, other: "Pose") -> float:
        """Relative rotation angle in radians."""
        R = self.rotation.T @ other.rotation
        c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.arccos(c))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InputError("principal point outside the image")
        if self.depth_scale <= 0:
            raise InputError("depth_scale must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, factor: float) -> "Intrinsics":
        return Intrinsics(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            int(round(self.width * factor)), int(round(self.height * factor)), self.depth_scale,
        )


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = field(default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InputError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            col = np.array(self.colors, dtype=np.uint8, copy=True).reshape(-1, 3)
            if len(col) != len(pts):
                raise InputError("colors must match points in length")
            col.setflags(write=False)
            object.__setattr__(self, "colors", col)

    @classmethod
    def empty(cls, with_colors: bool = False) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.uint8) if with_colors else None)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_colors(self) -> bool:
        return self.colors is not None

    def concatenate(self, other: "PointCloud") -> "PointCloud":
        if len(self) == 0:
            return other
        if len(other) == 0:
            return self
        colors = None
        if self.has_colors and other.has_colors:
            colors = np.vstack([self.colors, other.colors])
        return PointCloud(np.vstack([self.points, other.points]), colors)

    def select(self, mask) -> "PointCloud":
        return PointCloud(self.points[mask], None if self.colors is None else self.colors[mask])

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class PlaneParams:
    """Hessian plane ``n . p + d = 0``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = _frozen(self.normal).reshape(3)
        if not np.all(np.isfinite(n)) or not np.isfinite(self.offset):
            raise InputError("plane parameters must be finite")
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise InputError("plane normal must be unit length")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_coefficients(cls, a, b=None, c=None, d=None) -> "PlaneParams":
        """Build from ``(a, b, c, d)``, normalizing the normal."""
        coeffs = np.asarray(a if b is None else (a, b, c, d), dtype=np.float64)
        norm = np.linalg.norm(coeffs[:3])
        if norm == 0:
            raise InputError("zero normal")
        return cls(coeffs[:3] / norm, coeffs[3] / norm)

    @property
    def coefficients(self) -> np.ndarray:
        return np.append(self.normal, self.offset)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return p @ self.normal + self.offset

    def flipped(self) -> "PlaneParams":
        return PlaneParams(-self.normal, -self.offset)

    def oriented_towards(self, point: np.ndarray) -> "PlaneParams":
        """Flip so that ``point`` lies on the positive side."""
        if float(np.dot(self.normal, point) + self.offset) < 0:
            return self.flipped()
        return self


def to_metric_depth(depth_image: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Raw integer depth is divided by the depth scale; float depth is taken as meters."""
    depth = np.asarray(depth_image)
    if np.issubdtype(depth.dtype, np.integer):
        return depth.astype(np.float64) / intrinsics.depth_scale
    return depth.astype(np.float64)


def valid_depth_mask(depth_m: np.ndarray, depth_min: float = DEPTH_MIN, depth_max: float = DEPTH_MAX) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.isfinite(depth_m) & (depth_m > depth_min) & (depth_m < depth_max)


def pixel_rays(intrinsics: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel normalized ray components ``((u-cx)/fx, (v-cy)/fy)``."""
    u = (np.arange(intrinsics.width) - intrinsics.cx) / intrinsics.fx
    v = (np.arange(intrinsics.height) - intrinsics.cy) / intrinsics.fy
    return np.meshgrid(u, v)


def camera_points(depth_m: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Organized (H, W, 3) camera-frame points for a metric depth image."""
    xr, yr = pixel_rays(intrinsics)
    return np.stack([xr * depth_m, yr * depth_m, depth_m], axis=-1)


def backproject(
    depth_image: np.ndarray,
    intrinsics: Intrinsics,
    pose: Pose,
    mask: np.ndarray | None = None,
    colors: np.ndarray | None = None,
    depth_min: float = DEPTH_MIN,
    depth_max: float = DEPTH_MAX,
) -> PointCloud:
    """Lift masked pixels with valid depth into world coordinates."""
    depth_m = to_metric_depth(depth_image, intrinsics)
    if depth_m.shape != intrinsics.shape:
        raise InputError(f"depth image shape {depth_m.shape} does not match intrinsics {intrinsics.shape}")
    keep = valid_depth_mask(depth_m, depth_min, depth_max)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != depth_m.shape:
            raise InputError("mask shape does not match depth image")
        keep &= mask
    if colors is not None and np.asarray(colors).shape[:2] != depth_m.shape:
        raise InputError("color image shape does not match depth image")
    v, u = np.nonzero(keep)
    z = depth_m[v, u]
    pc = np.column_stack([(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z])
    col = None if colors is None else np.asarray(colors)[v, u, :3]
    return PointCloud(pose.apply_inverse(pc), col)


def project(points_world: np.ndarray, intrinsics: Intrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Project world points; returns pixel coordinates (N, 2) and camera depth (N,)."""
    pc = pose.apply(points_world)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * pc[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * pc[:, 1] / z + intrinsics.cy
    return np.column_stack([u, v]), z


def transform_plane(plane: PlaneParams, pose: Pose) -> PlaneParams:
    """Express a camera-frame plane in the world frame.

    A camera-frame point ``p_c = R p_w + t`` on ``n_c . p_c + d_c = 0`` gives
    ``(R^T n_c) . p_w + (t . n_c + d_c) = 0``. Signed distances are preserved,
    so a normal facing the observing camera keeps facing it.
    """
    n = np.asarray(plane.normal)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise InputError("plane normal must be unit length")
    n_w = pose.rotation.T @ n
    n_w = n_w / np.linalg.norm(n_w)
    return PlaneParams(n_w, float(pose.translation @ n + plane.offset))


def point_plane_distance(point, plane: PlaneParams) -> float:
    return float(abs(np.dot(plane.normal, np.asarray(point, dtype=np.float64)) + plane.offset))


def fit_plane(points: np.ndarray) -> tuple[PlaneParams, float]:
    """Total least squares plane; returns the plane and its RMS residual."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) < 3:
        raise DegenerateInputError("need at least 3 points to fit a plane")
    mean = p.mean(axis=0)
    q = p - mean
    evals, evecs = np.linalg.eigh(q.T @ q / len(p))
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        raise DegenerateInputError("points are collinear")
    n = evecs[:, 0]
    return PlaneParams(n / np.linalg.norm(n), float(-n @ mean)), float(np.sqrt(max(evals[0], 0.0)))


def box_iou(a, b) -> float:
    """IoU of two ``(u_min, v_min, u_max, v_max)`` boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def box_pixel_mask(box, shape: tuple[int, int]) -> np.ndarray:
    """Boolean mask of pixels touched by a continuous box, clipped to the image."""
    h, w = shape
    u0 = int(np.clip(np.floor(box[0]), 0, w))
    v0 = int(np.clip(np.floor(box[1]), 0, h))
    u1 = int(np.clip(np.ceil(box[2]), 0, w))
    v1 = int(np.clip(np.ceil(box[3]), 0, h))
    m = np.zeros(shape, dtype=bool)
    m[v0:v1, u0:u1] = True
    return m
