"""Refinement of 2D detections of potentially moving objects.

Three corrections are applied to raw detector output before the static map
is built: missed detections are filled in by a constant-velocity box
tracker, the foreground object inside each box is isolated by DBSCAN, and
the box is grown along depth-continuous borders (at most ``limit`` pixels
per side).
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .clustering import NOISE, dbscan
from .geometry import DEPTH_MAX, DEPTH_MIN, Intrinsics, box_iou, to_metric_depth, valid_depth_mask

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    class_id: str
    score: float
    box: tuple[float, float, float, float]
    movable: bool = False
    synthetic: bool = False

    def __post_init__(self):
        box = tuple(float(x) for x in self.box)
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ValueError(f"degenerate box {box}")
        object.__setattr__(self, "box", box)

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.box[0] + self.box[2]) / 2, (self.box[1] + self.box[3]) / 2])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.box[2] - self.box[0], self.box[3] - self.box[1]])

    @property
    def area(self) -> float:
        w, h = self.size
        return float(w * h)

    def with_box(self, box) -> "Detection":
        return dataclasses.replace(self, box=tuple(box))

    def clamped(self, width: int, height: int) -> "Detection | None":
        b = (max(self.box[0], 0.0), max(self.box[1], 0.0), min(self.box[2], float(width)), min(self.box[3], float(height)))
        if b[0] >= b[2] or b[1] >= b[3]:
            return None
        return self.with_box(b)


def box_from_center(center, size) -> tuple[float, float, float, float]:
    cu, cv = center
    w, h = size
    return (cu - w / 2, cv - h / 2, cu + w / 2, cv + h / 2)


def box_pixel_bounds(box, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer pixel bounds ``[u0, u1) x [v0, v1)`` covering a continuous box."""
    u0 = int(np.clip(np.floor(box[0]), 0, width))
    v0 = int(np.clip(np.floor(box[1]), 0, height))
    u1 = int(np.clip(np.ceil(box[2]), 0, width))
    v1 = int(np.clip(np.ceil(box[3]), 0, height))
    return u0, v0, u1, v1


# -- foreground extraction ---------------------------------------------------


@dataclass
class Foreground:
    mask: np.ndarray
    depth_range: tuple[float, float] | None

    @property
    def empty(self) -> bool:
        return self.depth_range is None


def extract_foreground(
    depth_image: np.ndarray,
    intrinsics: Intrinsics,
    det: Detection,
    stride: int = 4,
    eps: float = 0.1,
    min_pts: int = 8,
    min_fraction: float = 0.2,
    depth_min: float = DEPTH_MIN,
    depth_max: float = DEPTH_MAX,
) -> Foreground:
    """Pixel mask of the nearest substantial depth cluster inside ``det.box``.

    In-box pixels are sampled on a ``stride`` grid, lifted to camera
    coordinates and clustered. Among clusters holding at least
    ``min_fraction`` of the valid samples, the one with the smallest mean
    depth is the foreground; full-resolution pixels within ``eps`` of its
    samples form the mask.
    """
    depth_m = to_metric_depth(depth_image, intrinsics)
    h, w = depth_m.shape
    mask = np.zeros((h, w), dtype=bool)
    u0, v0, u1, v1 = box_pixel_bounds(det.box, w, h)
    if u0 >= u1 or v0 >= v1:
        return Foreground(mask, None)

    sub = depth_m[v0:v1:stride, u0:u1:stride]
    vs, us = np.mgrid[v0:v1:stride, u0:u1:stride]
    ok = valid_depth_mask(sub, depth_min, depth_max)
    if not ok.any():
        return Foreground(mask, None)
    z = sub[ok]
    u = us[ok]
    v = vs[ok]
    pts = np.column_stack([(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z])

    labels = dbscan(pts, eps, min_pts)
    ids, counts = np.unique(labels[labels != NOISE], return_counts=True)
    if len(ids) == 0:
        return Foreground(mask, None)
    big = ids[counts >= min_fraction * len(pts)]
    if len(big) == 0:
        big = ids[[int(np.argmax(counts))]]
    means = [z[labels == i].mean() for i in big]
    fg = int(big[int(np.argmin(means))])
    samples = pts[labels == fg]

    block = depth_m[v0:v1, u0:u1]
    bv, bu = np.mgrid[v0:v1, u0:u1]
    bok = valid_depth_mask(block, depth_min, depth_max)
    bz = block[bok]
    full = np.column_stack(
        [(bu[bok] - intrinsics.cx) * bz / intrinsics.fx, (bv[bok] - intrinsics.cy) * bz / intrinsics.fy, bz]
    )
    dist, _ = cKDTree(samples).query(full, k=1, distance_upper_bound=eps)
    near = np.isfinite(dist)
    mask[bv[bok][near], bu[bok][near]] = True
    zs = bz[near]
    return Foreground(mask, (float(zs.min()), float(zs.max())))


def expand_box(
    det: Detection,
    depth_range: tuple[float, float],
    depth_image: np.ndarray,
    intrinsics: Intrinsics | None = None,
    margin: float = 0.25,
    min_fraction: float = 0.1,
    limit: int = 50,
) -> Detection:
    """Grow box sides across depth-continuous borders, at most ``limit`` px each.

    A side moves outward by one pixel while the pixel line just outside it
    has at least ``min_fraction`` of its pixels with depth inside
    ``depth_range`` widened by ``margin``.
    """
    depth_m = to_metric_depth(depth_image, intrinsics) if intrinsics is not None else np.asarray(depth_image, float)
    h, w = depth_m.shape
    lo, hi = depth_range[0] - margin, depth_range[1] + margin
    with np.errstate(invalid="ignore"):
        near = np.isfinite(depth_m) & (depth_m >= lo) & (depth_m <= hi)

    u0, v0, u1, v1 = box_pixel_bounds(det.box, w, h)
    grown = [0, 0, 0, 0]  # left, top, right, bottom

    def dense(line: np.ndarray) -> bool:
        return line.size > 0 and line.mean() >= min_fraction

    changed = True
    while changed:
        changed = False
        if grown[0] < limit and u0 > 0 and dense(near[v0:v1, u0 - 1]):
            u0 -= 1
            grown[0] += 1
            changed = True
        if grown[1] < limit and v0 > 0 and dense(near[v0 - 1, u0:u1]):
            v0 -= 1
            grown[1] += 1
            changed = True
        if grown[2] < limit and u1 < w and dense(near[v0:v1, u1]):
            u1 += 1
            grown[2] += 1
            changed = True
        if grown[3] < limit and v1 < h and dense(near[v1, u0:u1]):
            v1 += 1
            grown[3] += 1
            changed = True

    box = (
        det.box[0] - grown[0] if grown[0] else det.box[0],
        det.box[1] - grown[1] if grown[1] else det.box[1],
        det.box[2] + grown[2] if grown[2] else det.box[2],
        det.box[3] + grown[3] if grown[3] else det.box[3],
    )
    box = (max(box[0], 0.0), max(box[1], 0.0), min(box[2], float(w)), min(box[3], float(h)))
    return det.with_box(box)


def refine_box(depth_image, intrinsics: Intrinsics, det: Detection, cfg=None) -> tuple[Detection, Foreground]:
    """Foreground extraction followed by depth-based expansion."""
    kw = {} if cfg is None else dict(stride=cfg.fg_stride, eps=cfg.fg_eps, min_pts=cfg.fg_min_pts,
                                     min_fraction=cfg.fg_min_fraction, depth_min=cfg.depth_min,
                                     depth_max=cfg.depth_max)
    fg = extract_foreground(depth_image, intrinsics, det, **kw)
    if fg.empty:
        return det, fg
    ekw = {} if cfg is None else dict(margin=cfg.expand_margin, min_fraction=cfg.expand_min_fraction,
                                      limit=cfg.expand_limit)
    return expand_box(det, fg.depth_range, depth_image, intrinsics, **ekw), fg


# -- missed-detection compensation ------------------------------------------


@dataclass
class TrackedBox:
    track_id: int
    class_id: str
    center: np.ndarray
    size: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    age: int = 0
    misses: int = 0
    history: list = field(default_factory=list)  # (age, cu, cv) of matched observations

    @property
    def box(self) -> tuple[float, float, float, float]:
        return box_from_center(self.center, self.size)

    def predicted_box(self) -> tuple[float, float, float, float]:
        return box_from_center(self.center + self.velocity, self.size)


def _fit_velocity(history: list, window: int) -> np.ndarray:
    obs = np.asarray(history[-window:], dtype=np.float64)
    if len(obs) < 2:
        return np.zeros(2)
    t = obs[:, 0] - obs[:, 0].mean()
    denom = float(t @ t)
    if denom == 0:
        return np.zeros(2)
    return (t @ (obs[:, 1:] - obs[:, 1:].mean(axis=0))) / denom


def greedy_match(boxes_a: list, boxes_b: list, threshold: float) -> list[tuple[int, int]]:
    """Greedy one-to-one matching by descending IoU (ties by index)."""
    cand = []
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            iou = box_iou(a, b)
            if iou >= threshold:
                cand.append((-iou, i, j))
    cand.sort()
    used_a, used_b, out = set(), set(), []
    for _, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out.append((i, j))
    return out


def track_step(
    tracks: list[TrackedBox],
    detections: list[Detection],
    iou_threshold: float = 0.3,
    max_misses: int = 3,
    velocity_window: int = 5,
    next_id: int | None = None,
) -> tuple[list[TrackedBox], list[Detection]]:
    """Advance every track one frame and compensate missed movable detections.

    Returns the surviving tracks and synthetic detections (score 0) for
    tracks that went unmatched this frame.
    """
    movable = [d for d in detections if d.movable]
    tracks = [dataclasses.replace(t, history=list(t.history)) for t in tracks]
    if next_id is None:
        next_id = max((t.track_id for t in tracks), default=-1) + 1

    matched_t: set[int] = set()
    matched_d: set[int] = set()
    for cls in sorted({t.class_id for t in tracks} | {d.class_id for d in movable}):
        ti = [i for i, t in enumerate(tracks) if t.class_id == cls]
        di = [j for j, d in enumerate(movable) if d.class_id == cls]
        pairs = greedy_match([tracks[i].predicted_box() for i in ti], [movable[j].box for j in di], iou_threshold)
        for a, b in pairs:
            i, j = ti[a], di[b]
            t, d = tracks[i], movable[j]
            t.age += 1
            t.center = d.center
            t.size = d.size
            t.history.append((t.age, *d.center))
            t.velocity = _fit_velocity(t.history, velocity_window)
            t.misses = 0
            matched_t.add(i)
            matched_d.add(j)

    survivors, compensated = [], []
    for i, t in enumerate(tracks):
        if i not in matched_t:
            t.age += 1
            t.center = t.center + t.velocity
            t.misses += 1
            if t.misses > max_misses:
                continue
            compensated.append(Detection(t.class_id, 0.0, t.box, movable=True, synthetic=True))
        survivors.append(t)

    for j, d in enumerate(movable):
        if j not in matched_d:
            survivors.append(TrackedBox(next_id, d.class_id, d.center, d.size, history=[(0, *d.center)]))
            next_id += 1
    return survivors, compensated


class BoxTracker:
    """Stateful wrapper around :func:`track_step` (single writer)."""

    def __init__(self, iou_threshold: float = 0.3, max_misses: int = 3, velocity_window: int = 5):
        self.iou_threshold = iou_threshold
        self.max_misses = max_misses
        self.velocity_window = velocity_window
        self.tracks: list[TrackedBox] = []
        self._next_id = 0

    def step(self, detections: list[Detection]) -> list[Detection]:
        self.tracks, compensated = track_step(
            self.tracks, detections, self.iou_threshold, self.max_misses, self.velocity_window, self._next_id
        )
        self._next_id = max([self._next_id - 1] + [t.track_id for t in self.tracks]) + 1
        if compensated:
            logger.debug("compensated %d missed detections", len(compensated))
        return compensated
