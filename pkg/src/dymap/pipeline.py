"""End-to-end mapping over a posed depth sequence with per-frame detections."""

from __future__ import annotations

import logging
import time
from collections import defaultdict
from contextlib import contextmanager

import numpy as np

from .config import Config
from .detection import BoxTracker, Detection, box_pixel_bounds, refine_box
from .geometry import (
    DegenerateInputError,
    InputError,
    Intrinsics,
    PointCloud,
    Pose,
    camera_points,
    to_metric_depth,
    valid_depth_mask,
)
from .io import FrameRecord, MapBundle
from .object_map import DetectionInstance, ObjectMap
from .object_param import clean_cloud, parameterize
from .planes import PlaneMap, PlaneObservation, PlaneThresholds, extract_planes, filter_plane
from .static_map import KeyframeSelector, VoxelGridFilter, build_octree, extract_static_cloud, fuse, movable_mask

logger = logging.getLogger(__name__)


class _Timer:
    def __init__(self):
        self.totals: dict[str, float] = defaultdict(float)

    @contextmanager
    def __call__(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter() - start


def plane_kwargs(cfg: Config) -> dict:
    return dict(cell_size=cfg.plane_cell_size, cell_rms=cfg.plane_cell_rms, angle_deg=cfg.plane_angle_deg,
                grow_distance=cfg.plane_grow_distance, min_pixels=cfg.plane_min_pixels,
                inlier_tol=cfg.plane_inlier_tol, noise_per_m=cfg.depth_noise_per_m,
                cell_min_valid=cfg.plane_cell_min_valid, depth_min=cfg.depth_min, depth_max=cfg.depth_max)


def _box_overlap_fraction(box, mask: np.ndarray) -> float:
    h, w = mask.shape
    u0, v0, u1, v1 = box_pixel_bounds(box, w, h)
    area = (u1 - u0) * (v1 - v0)
    return float(mask[v0:v1, u0:u1].sum()) / area if area > 0 else 1.0


def detection_instance(
    depth_image: np.ndarray,
    intrinsics: Intrinsics,
    pose: Pose,
    det: Detection,
    movable: np.ndarray,
    frame_planes: list[PlaneObservation],
    cfg: Config,
) -> DetectionInstance | None:
    """Dense cleaned object cloud and cuboid for one static-class detection.

    In-box pixels outside movable boxes are lifted to 3D; points near a
    support or background plane of this frame (one that shows in or around
    the box but mostly lies outside it) are removed before the largest DBSCAN cluster is
    kept.
    """
    h, w = intrinsics.height, intrinsics.width
    if _box_overlap_fraction(det.box, movable) > cfg.object_max_box_overlap:
        return None
    u0, v0, u1, v1 = box_pixel_bounds(det.box, w, h)
    box_mask = np.zeros((h, w), dtype=bool)
    box_mask[v0:v1, u0:u1] = True
    bw, bh = (u1 - u0) // 2, (v1 - v0) // 2
    near_box = np.zeros((h, w), dtype=bool)
    near_box[max(v0 - bh, 0):v1 + bh, max(u0 - bw, 0):u1 + bw] = True
    in_box = np.zeros((h, w), dtype=bool)
    in_box[v0:v1:cfg.object_stride, u0:u1:cfg.object_stride] = True
    depth_m = to_metric_depth(depth_image, intrinsics)
    sel = in_box & ~movable & valid_depth_mask(depth_m, cfg.depth_min, cfg.depth_max)
    if sel.sum() < cfg.object_min_points:
        return None
    pts = camera_points(np.where(sel, depth_m, 0.0), intrinsics)[sel]
    keep = np.ones(len(pts), dtype=bool)
    for obs in frame_planes:
        if not (obs.mask & near_box).any() or (obs.mask & box_mask).sum() >= 0.5 * obs.pixel_count:
            continue  # not seen around the box, or mostly the object itself
        # depth noise of a point on the plane moves it by noise * |d| along the normal
        tol = max(0.02, cfg.object_plane_sigma * cfg.depth_noise_per_m * abs(obs.params.offset))
        keep &= np.abs(obs.params.signed_distance(pts)) > tol
    cloud = clean_cloud(pose.apply_inverse(pts[keep]), cfg.object_eps, cfg.object_min_pts)
    if cloud is None or len(cloud) < cfg.object_min_points:
        return None
    try:
        cuboid = parameterize(cloud, cfg)
    except DegenerateInputError:
        return None
    return DetectionInstance(det.class_id, det.box, cloud, cuboid)


def run_pipeline(frames: list[FrameRecord], intrinsics: Intrinsics, cfg: Config | None = None) -> MapBundle:
    """Build the four map layers from keyframes of ``frames``.

    The tracker sees every frame so that missed movable detections can be
    filled in; everything else runs on keyframes only. Errors inside the
    processing of one keyframe are logged and the keyframe is skipped;
    unreadable or mismatched depth images abort the run.
    """
    cfg = cfg or Config()
    timer = _Timer()
    t_start = time.perf_counter()
    tracker = BoxTracker(cfg.tracker_iou, cfg.tracker_max_misses, cfg.tracker_velocity_window)
    select = KeyframeSelector(cfg.keyframe_interval, cfg.keyframe_translation, cfg.keyframe_rotation_deg)
    voxel_filter = VoxelGridFilter(cfg.leaf_size)
    plane_map = PlaneMap(PlaneThresholds.from_config(cfg), cfg.plane_leaf_size)
    object_map = ObjectMap(cfg)
    cloud = PointCloud.empty()
    movable_classes = set(cfg.movable_classes)
    counts = defaultdict(int)
    corrected_log: list[dict] = []
    last_ts = -np.inf

    for frame in frames:
        if frame.timestamp <= last_ts:
            raise InputError(f"timestamps not increasing at {frame.timestamp}")
        last_ts = frame.timestamp
        counts["frames"] += 1
        dets = []
        for d in frame.detections:
            d = Detection(d.class_id, d.score, d.box, movable=d.class_id in movable_classes)
            d = d.clamped(intrinsics.width, intrinsics.height)
            if d is not None:
                dets.append(d)
        counts["detections"] += len(dets)
        with timer("tracking"):
            compensated = tracker.step(dets)
        counts["compensated"] += len(compensated)
        if not select(frame.pose):
            continue
        keyframe = counts["keyframes"]
        counts["keyframes"] += 1
        try:
            depth = frame.load_depth()
            color = frame.load_color()
        except OSError as exc:
            raise InputError(f"cannot read frame {frame.timestamp}: {exc}") from exc
        if depth.shape != intrinsics.shape:
            raise InputError(f"depth image {frame.depth_path} has shape {depth.shape}, expected {intrinsics.shape}")
        if color is not None and color.shape[:2] != depth.shape:
            color = None
        try:
            with timer("refine"):
                movable_dets = [d for d in dets if d.movable] + compensated
                corrected = [refine_box(depth, intrinsics, d, cfg)[0] for d in movable_dets]
            corrected_log.append({"timestamp": frame.timestamp, "boxes": [list(d.box) for d in corrected],
                                  "synthetic": [d.synthetic for d in corrected]})
            with timer("static_map"):
                static = extract_static_cloud(depth, intrinsics, frame.pose, corrected, color,
                                              cfg.depth_min, cfg.depth_max)
                cloud = fuse(cloud, static, voxel_filter)
            observations: list[PlaneObservation] = []
            if cfg.enable_planes or cfg.enable_objects:
                with timer("plane_extract"):
                    observations = extract_planes(depth, intrinsics, **plane_kwargs(cfg))
            if cfg.enable_planes:
                with timer("plane_map"):
                    kept = [o for o in observations if filter_plane(o, corrected, cfg.plane_max_depth,
                                                                     cfg.plane_min_inlier_ratio,
                                                                     cfg.plane_max_box_overlap)]
                    counts["plane_observations"] += len(kept)
                    plane_map.integrate(kept, frame.pose)
                    if cfg.merge_interval > 0 and counts["keyframes"] % cfg.merge_interval == 0:
                        plane_map.maintain()
            if cfg.enable_objects:
                with timer("objects"):
                    movable = movable_mask(corrected, intrinsics.shape)
                    instances = []
                    for d in dets:
                        if d.movable:
                            continue
                        inst = detection_instance(depth, intrinsics, frame.pose, d, movable, observations, cfg)
                        if inst is not None:
                            instances.append(inst)
                    counts["object_detections"] += len(instances)
                    object_map.integrate(instances, frame.pose, intrinsics, keyframe, plane_map.planes)
        except (ValueError, np.linalg.LinAlgError) as exc:
            counts["failed_keyframes"] += 1
            logger.warning("keyframe at %.6f skipped: %s", frame.timestamp, exc)

    if cfg.enable_planes:
        with timer("plane_map"):
            plane_map.maintain()
    with timer("octree"):
        octree = build_octree(cloud, cfg.octree_resolution, cfg.min_points_per_voxel)
    timer.totals["total"] = time.perf_counter() - t_start
    report = {
        "counts": {
            "frames": counts["frames"],
            "keyframes": counts["keyframes"],
            "detections": counts["detections"],
            "compensated_detections": counts["compensated"],
            "failed_keyframes": counts["failed_keyframes"],
            "static_points": len(cloud),
            "octree_leaves": len(octree),
            "plane_observations": counts["plane_observations"],
            "planes": len(plane_map),
            "object_detections": counts["object_detections"],
            "objects": len(object_map),
        },
        "corrected_boxes": corrected_log,
        "timings": {k: round(v, 4) for k, v in sorted(timer.totals.items())},
    }
    return MapBundle(cloud, octree, plane_map.planes, object_map.objects, report)
