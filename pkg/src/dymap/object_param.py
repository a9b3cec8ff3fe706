"""Oriented-cuboid parameterization of object point clouds.

An object is ``O = {R_wo, t_wo, s}``: PCA gives the axes (descending
variance), per-axis extrema the size and box center. When the footprint is
nearly square, clumpy, or otherwise unreliable for PCA, the in-plane axes
are replaced by those of the minimum-area rectangle of the footprint,
found with a Graham scan hull and rotating calipers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import cluster_sizes, dbscan
from .geometry import DegenerateInputError

@dataclass(frozen=True)
class Cuboid:
    rotation: np.ndarray
    translation: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        for name, shape in (("rotation", (3, 3)), ("translation", (3,)), ("size", (3,))):
            a = np.array(getattr(self, name), dtype=np.float64, copy=True).reshape(shape)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size))

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return (signs * self.size / 2) @ self.rotation.T + self.translation

    def face_centers(self) -> np.ndarray:
        half = np.diag(self.size / 2)
        return np.vstack([half, -half]) @ self.rotation.T + self.translation

    def contains(self, points: np.ndarray, tol: float = 1e-9, scale: float = 1.0) -> np.ndarray:
        local = to_object_frame(points, self)
        return np.all(np.abs(local) <= self.size * scale / 2 + tol, axis=1)

    def ellipsoid(self) -> dict:
        """Inscribed ellipsoid, for display only."""
        return {"rotation": self.rotation.tolist(), "center": self.translation.tolist(),
                "semi_axes": (self.size / 2).tolist()}

@dataclass(frozen=True)
class ObjectCloud:
    points: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def __len__(self) -> int:
        return len(self.points)

def clean_cloud(points, eps: float = 0.05, min_pts: int = 10) -> ObjectCloud | None:
    """Largest DBSCAN cluster (first in scan order on ties); ``None`` if none survives."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < min_pts:
        return None
    labels = dbscan(pts, eps, min_pts)
    sizes = cluster_sizes(labels)
    if not sizes:
        return None
    best = max(sizes, key=lambda k: (sizes[k], -k))
    return ObjectCloud(pts[labels == best])

# -- planar hull and minimum rectangle --------------------------------------

def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

def convex_hull(points2d) -> np.ndarray:
    """Graham scan; counterclockwise hull vertices with collinear points dropped."""
    pts = np.unique(np.asarray(points2d, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        return pts
    pivot_idx = np.lexsort((pts[:, 0], pts[:, 1]))[0]
    pivot = pts[pivot_idx]
    rest = np.delete(pts, pivot_idx, axis=0)
    d = rest - pivot
    angle = np.arctan2(d[:, 1], d[:, 0])
    dist = np.hypot(d[:, 0], d[:, 1])
    rest = rest[np.lexsort((dist, angle))]
    hull = [pivot]
    for p in rest:
        while len(hull) > 1 and _cross(hull[-2], hull[-1], p) <= 0:
            hull.pop()
        hull.append(p)
    return np.array(hull)

@dataclass(frozen=True)
class Rect2D:
    axis_u: np.ndarray
    axis_v: np.ndarray
    extents: np.ndarray
    center: np.ndarray
    area: float

def min_rect(points2d) -> Rect2D:
    """Minimum-area enclosing rectangle by rotating calipers over hull edges."""
    hull = convex_hull(points2d)
    if len(hull) < 3:
        raise DegenerateInputError("points are collinear")
    edges = np.roll(hull, -1, axis=0) - hull
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    best = None
    for e, length in zip(edges, lengths):
        if length == 0:
            continue
        u = e / length
        v = np.array([-u[1], u[0]])
        pu, pv = hull @ u, hull @ v
        area = (pu.max() - pu.min()) * (pv.max() - pv.min())
        if best is None or area < best[0]:
            best = (area, u, v, pu, pv)
    area, u, v, pu, pv = best
    cu, cv = (pu.max() + pu.min()) / 2, (pv.max() + pv.min()) / 2
    return Rect2D(u, v, np.array([pu.max() - pu.min(), pv.max() - pv.min()]), cu * u + cv * v, float(area))

# -- cuboid fitting -----------------------------------------------------------

def to_object_frame(points, cuboid: Cuboid) -> np.ndarray:
    """``P_o = R^T P_w - R^T t``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return p @ cuboid.rotation - cuboid.translation @ cuboid.rotation

def from_object_frame(points, cuboid: Cuboid) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return p @ cuboid.rotation.T + cuboid.translation

def _sign_fixed(R: np.ndarray) -> np.ndarray:
    R = R.copy()
    for k in range(3):
        col = R[:, k]
        if col[np.argmax(np.abs(col))] < 0:
            R[:, k] = -col
    if np.linalg.det(R) < 0:
        R[:, 2] = -R[:, 2]
    return R

def _box_in_frame(points: np.ndarray, centroid: np.ndarray, R: np.ndarray) -> Cuboid:
    """Tight box along the columns of ``R``; length axis ordered before width."""
    local = (points - centroid) @ R
    lo, hi = local.min(axis=0), local.max(axis=0)
    size, center = hi - lo, (hi + lo) / 2
    if size[0] < size[1]:
        R = R[:, [1, 0, 2]]
        size = size[[1, 0, 2]]
        center = center[[1, 0, 2]]
    return Cuboid(_sign_fixed(R), R @ center + centroid, size)

def pca_parameterize(cloud: ObjectCloud | np.ndarray) -> Cuboid:
    """Cuboid from principal axes; ``t_wo = R_wo C_o + mean``."""
    pts = cloud.points if isinstance(cloud, ObjectCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 4:
        raise DegenerateInputError("need at least 4 points")
    centroid = pts.mean(axis=0)
    q = pts - centroid
    evals, evecs = np.linalg.eigh(q.T @ q / len(pts))
    if evals[2] <= 0 or evals[0] / evals[2] < 1e-9:
        raise DegenerateInputError("covariance is rank deficient")
    return _box_in_frame(pts, centroid, evecs[:, ::-1])

def needs_correction(
    cloud: ObjectCloud | np.ndarray,
    cuboid: Cuboid,
    aspect: float = 0.85,
    eig_ratio: float = 0.85,
    cluster_fraction: float = 0.2,
    eps: float = 0.05,
    min_pts: int = 10,
) -> bool:
    """Whether the PCA yaw is unreliable: near-square, isotropic, or multi-blob footprint."""
    pts = cloud.points if isinstance(cloud, ObjectCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if cuboid.size[0] > 0 and cuboid.size[1] / cuboid.size[0] > aspect:
        return True
    xy = to_object_frame(pts, cuboid)[:, :2]
    if len(xy) >= 2:
        ev = np.linalg.eigvalsh(np.cov(xy.T))
        if ev[1] > 0 and eig_ratio <= ev[0] / ev[1] <= 1.0:
            return True
    labels = dbscan(xy, eps, min_pts)
    big = [c for c in cluster_sizes(labels).values() if c >= cluster_fraction * len(xy)]
    return len(big) >= 2

def correct_with_min_rect(cloud: ObjectCloud | np.ndarray, cuboid: Cuboid) -> Cuboid:
    """Replace the in-plane axes with the footprint's minimum-area rectangle axes.

    The rectangle axes are rotated into the world frame (as directions) and
    orthonormalized against the fixed third axis. Size and center are then
    recomputed from the extrema in the corrected frame.
    """
    pts = cloud.points if isinstance(cloud, ObjectCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    xy = to_object_frame(pts, cuboid)[:, :2]
    try:
        rect = min_rect(xy)
    except DegenerateInputError:
        return cuboid
    R = cuboid.rotation
    v3 = R[:, 2]
    v1 = R @ np.array([rect.axis_u[0], rect.axis_u[1], 0.0])
    v1 = v1 - (v1 @ v3) * v3
    v1 /= np.linalg.norm(v1)
    v2 = np.cross(v3, v1)
    return _box_in_frame(pts, pts.mean(axis=0), np.column_stack([v1, v2, v3]))

def parameterize(cloud: ObjectCloud | np.ndarray, cfg=None, force_correction: bool = False) -> Cuboid:
    """PCA cuboid, corrected by the minimum rectangle when the footprint calls for it."""
    cuboid = pca_parameterize(cloud)
    kw = {} if cfg is None else dict(aspect=cfg.correction_aspect, eig_ratio=cfg.correction_eig_ratio,
                                     cluster_fraction=cfg.correction_cluster_fraction,
                                     eps=cfg.object_eps, min_pts=cfg.object_min_pts)
    if force_correction or needs_correction(cloud, cuboid, **kw):
        cuboid = correct_with_min_rect(cloud, cuboid)
    return cuboid
