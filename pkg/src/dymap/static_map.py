"""Static dense point cloud map and its occupancy octree."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import DEPTH_MAX, DEPTH_MIN, Intrinsics, PointCloud, Pose, backproject, box_pixel_mask


@dataclass(frozen=True)
class VoxelGridFilter:
    leaf_size: float = 0.02

    def __post_init__(self):
        if not self.leaf_size > 0:
            raise ValueError("leaf_size must be positive")

    def __call__(self, cloud: PointCloud) -> PointCloud:
        return voxel_downsample(cloud, self.leaf_size)


def voxel_keys(points: np.ndarray, size: float) -> np.ndarray:
    """Integer voxel indices of a grid anchored at the world origin."""
    return np.floor(np.asarray(points, dtype=np.float64) / size).astype(np.int64)


def _packed_keys(keys: np.ndarray) -> np.ndarray:
    """Rows of integer voxel indices as scalars with the same lexicographic order."""
    rel = keys - keys.min(axis=0)
    span = rel.max(axis=0).astype(object) + 1
    if span[0] * span[1] * span[2] < 2**62:
        return (rel[:, 0] * int(span[1] * span[2])) + (rel[:, 1] * int(span[2])) + rel[:, 2]
    _, packed = np.unique(keys, axis=0, return_inverse=True)
    return packed.reshape(-1)


def voxel_downsample(cloud: PointCloud, leaf_size: float) -> PointCloud:
    """One point per occupied leaf at the centroid of its members.

    Output is ordered by voxel index, so the result does not depend on the
    order of the input points beyond floating point summation.
    """
    if len(cloud) == 0:
        return cloud
    _, inverse, counts = np.unique(_packed_keys(voxel_keys(cloud.points, leaf_size)),
                                   return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)
    sums = np.zeros((m, 3))
    for k in range(3):
        sums[:, k] = np.bincount(inverse, weights=cloud.points[:, k], minlength=m)
    points = sums / counts[:, None]
    colors = None
    if cloud.has_colors:
        csum = np.zeros((m, 3))
        for k in range(3):
            csum[:, k] = np.bincount(inverse, weights=cloud.colors[:, k].astype(np.float64), minlength=m)
        colors = np.clip(np.rint(csum / counts[:, None]), 0, 255).astype(np.uint8)
    return PointCloud(points, colors)


def fuse(map_cloud: PointCloud, new_cloud: PointCloud, voxel_filter: VoxelGridFilter) -> PointCloud:
    """Stitch a new world-frame cloud into the map and downsample."""
    if len(map_cloud) and len(new_cloud) and map_cloud.has_colors != new_cloud.has_colors:
        map_cloud = PointCloud(map_cloud.points)
        new_cloud = PointCloud(new_cloud.points)
    return voxel_filter(map_cloud.concatenate(new_cloud))


_BITS = 21


def _encode(rel: np.ndarray) -> np.ndarray:
    return (rel[:, 0] << (2 * _BITS)) | (rel[:, 1] << _BITS) | rel[:, 2]


class VoxelOctree:
    """Linear (pointerless) occupancy octree.

    Leaves are cubes of edge ``resolution`` on a grid anchored at the world
    origin. The root is the cube of ``2**depth`` leaves starting at
    ``origin_key``. Each level stores the sorted packed integer codes of
    its non-empty nodes, level ``depth`` being the leaves; a query descends
    from the root and stops at the first empty node.
    """

    def __init__(self, resolution: float, origin_key: np.ndarray, depth: int, levels: list[np.ndarray]):
        self.resolution = float(resolution)
        self.origin_key = np.asarray(origin_key, dtype=np.int64)
        self.depth = int(depth)
        self.levels = levels

    @classmethod
    def empty(cls, resolution: float) -> "VoxelOctree":
        return cls(resolution, np.zeros(3, np.int64), 0, [np.zeros(0, np.int64)])

    @classmethod
    def from_leaf_codes(cls, resolution: float, origin_key, depth: int, codes) -> "VoxelOctree":
        """Rebuild the inner levels from the packed leaf codes."""
        codes = np.unique(np.asarray(codes, dtype=np.int64))
        if len(codes) == 0:
            return cls.empty(resolution)
        mask = (1 << _BITS) - 1
        rel = np.column_stack([codes >> (2 * _BITS), (codes >> _BITS) & mask, codes & mask])
        levels = [np.unique(_encode(rel >> (depth - level))) for level in range(depth + 1)]
        return cls(resolution, origin_key, depth, levels)

    @property
    def extent(self) -> float:
        """Edge length of the root cube in meters."""
        return self.resolution * (1 << self.depth)

    def __len__(self) -> int:
        return len(self.levels[-1])

    def node_count(self) -> int:
        return sum(len(level) for level in self.levels)

    def occupied_keys(self) -> np.ndarray:
        """Occupied leaf keys in world grid coordinates, sorted lexicographically."""
        codes = self.levels[-1]
        mask = (1 << _BITS) - 1
        rel = np.column_stack([codes >> (2 * _BITS), (codes >> _BITS) & mask, codes & mask])
        return rel.astype(np.int64) + self.origin_key

    def occupied_centers(self) -> np.ndarray:
        return (self.occupied_keys() + 0.5) * self.resolution

    def contains(self, point) -> bool:
        return bool(self.query(np.asarray(point, dtype=np.float64).reshape(1, 3))[0])

    def query(self, points: np.ndarray) -> np.ndarray:
        """Occupancy of the leaves containing ``points``; outside the root is free."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.levels[-1]) == 0:
            return np.zeros(len(pts), dtype=bool)
        rel = voxel_keys(pts, self.resolution) - self.origin_key
        alive = np.all((rel >= 0) & (rel < (1 << self.depth)), axis=1)
        for level, codes in enumerate(self.levels):
            idx = np.flatnonzero(alive)
            if len(idx) == 0:
                break
            node = _encode(rel[idx] >> (self.depth - level))
            pos = np.searchsorted(codes, node)
            found = (pos < len(codes)) & (codes[np.minimum(pos, len(codes) - 1)] == node)
            alive[idx[~found]] = False
        return alive


def build_octree(cloud: PointCloud, resolution: float = 0.05, min_points_per_voxel: int = 1) -> VoxelOctree:
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    if len(cloud) == 0:
        return VoxelOctree.empty(resolution)
    keys = voxel_keys(cloud.points, resolution)
    uniq, counts = np.unique(keys, axis=0, return_counts=True)
    uniq = uniq[counts >= min_points_per_voxel]
    if len(uniq) == 0:
        return VoxelOctree.empty(resolution)
    origin = uniq.min(axis=0)
    rel = uniq - origin
    span = int(rel.max()) + 1
    if span > (1 << _BITS):
        raise ValueError("cloud extent too large for the octree key space")
    depth = math.ceil(math.log2(span)) if span > 1 else 0
    levels = [np.unique(_encode(rel >> (depth - level))) for level in range(depth + 1)]
    return VoxelOctree(resolution, origin, depth, levels)


def movable_mask(boxes, shape: tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for b in boxes:
        mask |= box_pixel_mask(getattr(b, "box", b), shape)
    return mask


def extract_static_cloud(
    depth_image: np.ndarray,
    intrinsics: Intrinsics,
    pose: Pose,
    corrected_boxes,
    colors: np.ndarray | None = None,
    depth_min: float = DEPTH_MIN,
    depth_max: float = DEPTH_MAX,
) -> PointCloud:
    """World-frame cloud of valid pixels outside every corrected movable box."""
    keep = ~movable_mask(corrected_boxes, intrinsics.shape)
    return backproject(depth_image, intrinsics, pose, keep, colors, depth_min, depth_max)


class KeyframeSelector:
    """Every ``interval``-th frame, or earlier when the camera moved enough."""

    def __init__(self, interval: int = 5, translation: float = 0.1, rotation_deg: float = 10.0):
        self.interval = interval
        self.translation = translation
        self.rotation = math.radians(rotation_deg)
        self._last_pose: Pose | None = None
        self._since = 0

    def __call__(self, pose: Pose) -> bool:
        if self._last_pose is None:
            take = True
        else:
            self._since += 1
            moved = np.linalg.norm(pose.camera_center - self._last_pose.camera_center) > self.translation
            turned = self._last_pose.rotation_angle_to(pose) > self.rotation
            take = self._since >= self.interval or moved or turned
        if take:
            self._last_pose = pose
            self._since = 0
        return take
