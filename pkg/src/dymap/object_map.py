"""Object map: data association of detection instances and cuboid updates.

A detection instance is associated with a map object of the same class when
its projection IoU is high enough and at least one of three supporting
strategies agrees (motion IoU, shared map points, centroid t-test).
Strategies that cannot be evaluated abstain instead of voting.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .geometry import DegenerateInputError, Intrinsics, PlaneParams, PointCloud, Pose, box_iou, project
from .iforest import isolation_forest_scores
from .object_param import Cuboid, ObjectCloud, parameterize
from .static_map import voxel_downsample
from .tstats import TTestResult, t_test

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectionInstance:
    class_id: str
    box: tuple[float, float, float, float]
    cloud: ObjectCloud
    cuboid: Cuboid

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise ValueError("detection instance needs a non-empty cloud")

    @property
    def centroid(self) -> np.ndarray:
        return self.cloud.centroid


@dataclass(frozen=True)
class ObservationRecord:
    keyframe: int
    box: tuple[float, float, float, float]
    pose: Pose


@dataclass
class ObjectInstance:
    id: int
    class_id: str
    cuboid: Cuboid
    points: np.ndarray
    centroids: list = field(default_factory=list)
    records: list = field(default_factory=list)
    last_box: tuple[float, float, float, float] | None = None
    box_velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    last_keyframe: int = 0
    rejected_updates: int = 0

    @property
    def m(self) -> int:
        return len(self.centroids)

    @property
    def centroid_mean(self) -> np.ndarray:
        return np.mean(self.centroids, axis=0)

    @property
    def centroid_std(self) -> np.ndarray | None:
        if self.m < 2:
            return None
        return np.std(self.centroids, axis=0, ddof=1)

    @property
    def observations(self) -> int:
        return len(self.records)


# -- association strategies --------------------------------------------------


def projected_box(cuboid: Cuboid, pose: Pose, intrinsics: Intrinsics):
    """Image bbox of the cuboid corners in front of the camera, clipped; ``None`` if none are."""
    uv, z = project(cuboid.corners(), intrinsics, pose)
    front = z > 0
    if not front.any():
        return None
    uv = uv[front]
    box = (max(uv[:, 0].min(), 0.0), max(uv[:, 1].min(), 0.0),
           min(uv[:, 0].max(), float(intrinsics.width)), min(uv[:, 1].max(), float(intrinsics.height)))
    if box[0] >= box[2] or box[1] >= box[3]:
        return None
    return box


def projection_iou(obj, box, pose: Pose, intrinsics: Intrinsics) -> float:
    """IoU of the detection box with the projected cuboid; 0 when the cuboid is behind or off-image."""
    cuboid = obj.cuboid if hasattr(obj, "cuboid") else obj
    proj = projected_box(cuboid, pose, intrinsics)
    return 0.0 if proj is None else box_iou(proj, box)


def predicted_box(obj: ObjectInstance, keyframe: int | None = None):
    if obj.last_box is None:
        return None
    steps = 1 if keyframe is None else keyframe - obj.last_keyframe
    du, dv = obj.box_velocity * steps
    b = obj.last_box
    return (b[0] + du, b[1] + dv, b[2] + du, b[3] + dv)


def motion_iou(obj: ObjectInstance, box, keyframe: int | None = None) -> float | None:
    """IoU with the constant-velocity prediction of the last box; ``None`` (abstain) without history."""
    pred = predicted_box(obj, keyframe)
    return None if pred is None else box_iou(pred, box)


def shared_info(points, box, pose: Pose, intrinsics: Intrinsics) -> float | None:
    """Fraction of map points in front of the camera that project inside ``box``."""
    pts = points.points if isinstance(points, (PointCloud, ObjectCloud)) else points
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return None
    uv, z = project(pts, intrinsics, pose)
    front = z > 0
    if not front.any():
        return None
    uv = uv[front]
    inside = (uv[:, 0] >= box[0]) & (uv[:, 0] <= box[2]) & (uv[:, 1] >= box[1]) & (uv[:, 1] <= box[3])
    return float(inside.mean())


def object_t_test(obj: ObjectInstance, c_d, cfg: Config | None = None) -> TTestResult:
    cfg = cfg or Config()
    return t_test(np.asarray(obj.centroids).reshape(-1, 3), c_d, cfg.t_alpha, cfg.t_min_obs, cfg.t_familywise)


@dataclass(frozen=True)
class AssociationScore:
    passed: bool
    projection: float
    motion: float | None
    shared: float | None
    t_passed: bool | None


def association_decision(
    obj: ObjectInstance,
    det: DetectionInstance,
    pose: Pose,
    intrinsics: Intrinsics,
    keyframe: int | None = None,
    cfg: Config | None = None,
) -> AssociationScore:
    """Evaluate the combined rule for one (object, detection) pair."""
    cfg = cfg or Config()
    proj = projection_iou(obj, det.box, pose, intrinsics)
    mot = motion_iou(obj, det.box, keyframe)
    sh = shared_info(obj.points, det.box, pose, intrinsics)
    tt = object_t_test(obj, det.centroid, cfg)
    t_pass = None if tt.abstained else tt.passed
    support = [mot is not None and mot >= cfg.motion_iou_th,
               sh is not None and sh >= cfg.shared_info_th,
               bool(t_pass)]
    passed = obj.class_id == det.class_id and proj >= cfg.proj_iou_th and any(support)
    return AssociationScore(passed, proj, mot, sh, t_pass)


def associate(
    det: DetectionInstance,
    objects,
    pose: Pose,
    intrinsics: Intrinsics,
    keyframe: int | None = None,
    cfg: Config | None = None,
) -> ObjectInstance | None:
    """Best passing same-class object: max projection IoU, then max shared info, then lowest id."""
    best, best_key = None, None
    for obj in objects:
        if obj.class_id != det.class_id:
            continue
        s = association_decision(obj, det, pose, intrinsics, keyframe, cfg)
        if not s.passed:
            continue
        key = (s.projection, -1.0 if s.shared is None else s.shared, -obj.id)
        if best_key is None or key > best_key:
            best, best_key = obj, key
    return best


# -- update --------------------------------------------------------------------


def within_prior(size, prior) -> bool:
    dims = np.sort(np.asarray(size, dtype=np.float64))[::-1]
    return all(lo <= s <= hi for s, (lo, hi) in zip(dims, prior))


def support_plane(cuboid: Cuboid, planes, max_distance: float = 0.1) -> PlaneParams | None:
    """Plane nearest any face center of the cuboid, oriented toward its center."""
    best, best_dist = None, max_distance
    faces = cuboid.face_centers()
    for plane in planes:
        params = getattr(plane, "params", plane)
        dist = float(np.abs(params.signed_distance(faces)).min())
        if dist < best_dist:
            best, best_dist = params, dist
    if best is None:
        return None
    return best.oriented_towards(cuboid.translation)


def mean_record_iou(cuboid: Cuboid, records, intrinsics: Intrinsics) -> float:
    if not records:
        return 0.0
    return float(np.mean([projection_iou(cuboid, r.box, r.pose, intrinsics) for r in records]))


def filter_map_points(points: np.ndarray, cuboid: Cuboid, planes, cfg: Config) -> np.ndarray:
    """Drop points under the support plane, far from the center, or isolated."""
    keep = np.ones(len(points), dtype=bool)
    plane = support_plane(cuboid, planes, cfg.support_plane_dist)
    if plane is not None:
        keep &= plane.signed_distance(points) >= -cfg.support_below
    keep &= np.linalg.norm(points - cuboid.translation, axis=1) <= cfg.outlier_diag_factor * cuboid.diagonal
    pts = points[keep]
    if len(pts) >= 8:
        scores = isolation_forest_scores(pts, cfg.iforest_trees, cfg.iforest_subsample, cfg.seed)
        pts = pts[scores <= cfg.iforest_threshold]
    return pts


def new_object(det: DetectionInstance, object_id: int, pose: Pose, keyframe: int = 0,
               cfg: Config | None = None) -> ObjectInstance:
    cfg = cfg or Config()
    pts = voxel_downsample(PointCloud(det.cloud.points), cfg.object_leaf_size).points
    # fit the stored points so a repeated observation re-parameterizes to the same cuboid
    try:
        cuboid = parameterize(pts, cfg) if len(pts) >= 4 else det.cuboid
    except DegenerateInputError:
        cuboid = det.cuboid
    return ObjectInstance(
        id=object_id,
        class_id=det.class_id,
        cuboid=cuboid,
        points=np.array(pts),
        centroids=[det.centroid],
        records=[ObservationRecord(keyframe, det.box, pose)],
        last_box=det.box,
        last_keyframe=keyframe,
    )


def update_object(
    obj: ObjectInstance,
    det: DetectionInstance,
    pose: Pose,
    planes=(),
    intrinsics: Intrinsics | None = None,
    keyframe: int | None = None,
    cfg: Config | None = None,
) -> ObjectInstance:
    """Merge the detection into the object and re-parameterize, accepting only plausible cuboids.

    The candidate cuboid is kept if its mean projection IoU over the recent
    observation records does not fall more than ``accept_iou_slack`` below
    the current cuboid's, and its sorted size lies within the class prior.
    The filtered merged points are kept whether or not the cuboid changes.
    """
    cfg = cfg or Config()
    keyframe = obj.last_keyframe + 1 if keyframe is None else keyframe
    merged = voxel_downsample(PointCloud(np.vstack([obj.points, det.cloud.points])), cfg.object_leaf_size).points
    filtered = filter_map_points(np.asarray(merged), obj.cuboid, planes, cfg)
    records = obj.records + [ObservationRecord(keyframe, det.box, pose)]
    window = records[-cfg.accept_history:]

    accepted = False
    cuboid = obj.cuboid
    if len(filtered) >= 4:
        try:
            candidate = parameterize(filtered, cfg)
        except DegenerateInputError:
            candidate = None
            logger.debug("object %d: degenerate re-parameterization", obj.id)
        if candidate is not None and within_prior(candidate.size, cfg.prior_for(obj.class_id)):
            if intrinsics is None:
                accepted = True
            else:
                accepted = (mean_record_iou(candidate, window, intrinsics)
                            >= mean_record_iou(obj.cuboid, window, intrinsics) - cfg.accept_iou_slack)
        if accepted:
            cuboid = candidate

    dt = max(keyframe - obj.last_keyframe, 1)
    velocity = (np.asarray(_center(det.box)) - _center(obj.last_box)) / dt if obj.last_box is not None else np.zeros(2)
    return dataclasses.replace(
        obj,
        cuboid=cuboid,
        points=filtered,
        centroids=obj.centroids + [det.centroid],
        records=records,
        last_box=det.box,
        box_velocity=velocity,
        last_keyframe=keyframe,
        rejected_updates=obj.rejected_updates + (0 if accepted else 1),
    )


def _center(box) -> np.ndarray:
    return np.array([(box[0] + box[2]) / 2, (box[1] + box[3]) / 2])


class ObjectMap:
    """Single-writer collection of object instances."""

    def __init__(self, cfg: Config | None = None):
        self.cfg = cfg or Config()
        self.objects: list[ObjectInstance] = []
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.objects)

    def integrate(self, detections, pose: Pose, intrinsics: Intrinsics, keyframe: int, planes=()) -> list[int]:
        """Associate and apply detections serially in order; each object updates at most once per frame."""
        ids = []
        touched: set[int] = set()
        for det in detections:
            candidates = [o for o in self.objects if o.id not in touched]
            match = associate(det, candidates, pose, intrinsics, keyframe, self.cfg)
            if match is None:
                obj = new_object(det, self._next_id, pose, keyframe, self.cfg)
                self._next_id += 1
                self.objects.append(obj)
            else:
                obj = update_object(match, det, pose, planes, intrinsics, keyframe, self.cfg)
                self.objects = [obj if o.id == obj.id else o for o in self.objects]
            touched.add(obj.id)
            ids.append(obj.id)
        return ids
