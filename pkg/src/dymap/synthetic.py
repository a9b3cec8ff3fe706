"""Ground-truthed synthetic RGB-D sequences in TUM layout.

A scene is a set of bounded planar rectangles (room surfaces), static
oriented boxes (furniture and objects), and moving actor boxes. Depth is
ray-cast per pixel (nearest hit), perturbed by depth-proportional Gaussian
noise, and stored as 16-bit PNG at the TUM depth scale. Detections are the
clipped image bounding boxes of projected box corners, with pixel jitter and
random misses.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .geometry import InputError, Intrinsics, PlaneParams, Pose, project
from .io import write_intrinsics
from .object_param import Cuboid

LABEL_NONE = 0
LABEL_ACTOR = 100


@dataclass
class Rect:
    """Bounded plane patch ``center + a*u + b*v`` with ``|a| <= half[0]``, ``|b| <= half[1]``."""

    name: str
    label: int
    center: tuple
    u: tuple
    v: tuple
    half: tuple

    @property
    def plane(self) -> PlaneParams:
        n = np.cross(self.u, self.v)
        n = n / np.linalg.norm(n)
        return PlaneParams(n, -float(n @ np.asarray(self.center, dtype=np.float64)))


@dataclass
class Box:
    name: str
    label: int
    center: tuple
    size: tuple
    yaw_deg: float = 0.0
    class_id: str | None = None

    @property
    def cuboid(self) -> Cuboid:
        R = Rotation.from_euler("z", self.yaw_deg, degrees=True).as_matrix()
        return Cuboid(R, self.center, self.size)


@dataclass
class Actor:
    """Upright box moving along a closed polyline of floor waypoints (one loop per sequence)."""

    name: str
    class_id: str
    size: tuple
    waypoints: list
    base_z: float = 0.025
    loops: float = 1.0

    def cuboid_at(self, s: float) -> Cuboid:
        pts = np.asarray(self.waypoints, dtype=np.float64)
        closed = np.vstack([pts, pts[:1]])
        seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        pos = (s * self.loops % 1.0) * cum[-1]
        k = min(int(np.searchsorted(cum, pos, side="right")) - 1, len(seg) - 1)
        a = (pos - cum[k]) / seg[k] if seg[k] > 0 else 0.0
        xy = closed[k] + a * (closed[k + 1] - closed[k])
        heading = closed[k + 1] - closed[k]
        yaw = math.atan2(heading[1], heading[0]) - math.pi / 2
        R = Rotation.from_euler("z", yaw).as_matrix()
        return Cuboid(R, (xy[0], xy[1], self.base_z + self.size[2] / 2), self.size)


@dataclass
class CameraPath:
    """Camera sweeping sinusoidally between two positions while looking at a sweeping target."""

    center: tuple = (0.475, 0.1, 1.6)
    sweep: tuple = (0.5, 0.0, 0.0)
    target: tuple = (0.475, 1.6, 0.2)
    target_sweep: tuple = (1.3, 0.0, 0.0)
    cycles: float = 1.0

    def pose_at(self, s: float) -> Pose:
        w = math.sin(2 * math.pi * self.cycles * s)
        c = np.asarray(self.center) + w * np.asarray(self.sweep)
        t = np.asarray(self.target) + w * np.asarray(self.target_sweep)
        return look_at(c, t)


@dataclass
class NoiseModel:
    depth_sigma_per_m: float = 0.01
    box_jitter_px: float = 3.0
    miss_probability: float = 0.1


@dataclass
class SyntheticScene:
    rects: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    actors: list = field(default_factory=list)
    camera: CameraPath = field(default_factory=CameraPath)
    noise: NoiseModel = field(default_factory=NoiseModel)
    frames: int = 300
    fps: float = 30.0
    start_time: float = 1.0
    width: int = 320
    height: int = 240
    focal: float = 262.5
    min_visible: float = 0.5
    max_truncated: float = 0.1
    min_actor_pixels: int = 100

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2,
                          self.width, self.height)

    def timestamps(self) -> np.ndarray:
        return self.start_time + np.arange(self.frames) / self.fps

    def phase(self, i: int) -> float:
        return i / max(self.frames - 1, 1)

    def pose(self, i: int) -> Pose:
        return self.camera.pose_at(self.phase(i))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticScene":
        data = dict(data)
        rects = [Rect(**r) for r in data.pop("rects", [])]
        boxes = [Box(**b) for b in data.pop("boxes", [])]
        actors = [Actor(**a) for a in data.pop("actors", [])]
        camera = CameraPath(**data.pop("camera", {}))
        noise = NoiseModel(**data.pop("noise", {}))
        return cls(rects, boxes, actors, camera, noise, **data)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose of a camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    if np.linalg.norm(f) == 0:
        raise InputError("camera target coincides with camera position")
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-9:
        raise InputError("camera looks along the up direction")
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R_cw = np.vstack([r, d, f])
    return Pose(R_cw, -R_cw @ eye)


def default_scene(**overrides) -> SyntheticScene:
    """Room with three walls, floor, a table with five objects, and one walking person."""
    fz, top = 0.025, 0.725
    wall_h = 2.2
    y0, y1 = -1.0, 2.175
    rects = [
        Rect("floor", 1, (0.0, (y0 + y1) / 2, fz), (1, 0, 0), (0, 1, 0), (1.475, (y1 - y0) / 2)),
        Rect("back_wall", 2, (0.0, y1, fz + wall_h / 2), (1, 0, 0), (0, 0, 1), (1.475, wall_h / 2)),
        Rect("left_wall", 3, (-1.475, (y0 + y1) / 2, fz + wall_h / 2), (0, 1, 0), (0, 0, 1),
             ((y1 - y0) / 2, wall_h / 2)),
        Rect("right_wall", 4, (1.475, (y0 + y1) / 2, fz + wall_h / 2), (0, 1, 0), (0, 0, 1),
             ((y1 - y0) / 2, wall_h / 2)),
    ]
    tx0, tx1, ty0, ty1 = -0.425, 1.375, 0.925, 1.525
    boxes = [
        Box("table", 5, ((tx0 + tx1) / 2, (ty0 + ty1) / 2, (fz + top) / 2), (tx1 - tx0, ty1 - ty0, top - fz)),
        Box("monitor", 10, (-0.15, 1.35, top + 0.17), (0.50, 0.08, 0.34), 0.0, "monitor"),
        Box("printer", 11, (0.22, 1.10, top + 0.08), (0.40, 0.28, 0.16), -8.0, "printer"),
        Box("books", 12, (0.58, 1.33, top + 0.05), (0.24, 0.17, 0.10), 25.0, "book"),
        Box("storage_box", 13, (0.95, 1.10, top + 0.07), (0.30, 0.22, 0.14), 15.0, "box"),
        Box("speaker", 14, (1.22, 1.38, top + 0.15), (0.16, 0.12, 0.30), 10.0, "speaker"),
    ]
    actors = [Actor("person", "person", (0.45, 0.3, 1.7), [(-0.9, 1.85), (1.0, 1.85)])]
    scene = SyntheticScene(rects, boxes, actors)
    for k, v in overrides.items():
        setattr(scene, k, v)
    return scene


# -- ray casting -------------------------------------------------------------


def _rays(intr: Intrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """World-frame origin and per-pixel directions scaled so the hit parameter equals camera depth."""
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    d_c = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones(u.shape)], axis=-1).reshape(-1, 3)
    return pose.camera_center, d_c @ pose.rotation


def _hit_rect(rect: Rect, origin, dirs) -> np.ndarray:
    plane = rect.plane
    denom = dirs @ plane.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -(plane.normal @ origin + plane.offset) / denom
    p = origin + t[:, None] * dirs - np.asarray(rect.center)
    inside = (np.abs(p @ np.asarray(rect.u, float)) <= rect.half[0]) & (np.abs(p @ np.asarray(rect.v, float)) <= rect.half[1])
    ok = np.isfinite(t) & (t > 0) & inside
    return np.where(ok, t, np.inf)


def _hit_cuboid(cuboid: Cuboid, origin, dirs) -> np.ndarray:
    o = (origin - cuboid.translation) @ cuboid.rotation
    d = dirs @ cuboid.rotation
    h = cuboid.size / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - o) / d
        t2 = (h - o) / d
    lo, hi = np.fmin(t1, t2), np.fmax(t1, t2)
    tmin = np.fmax(np.fmax(lo[:, 0], lo[:, 1]), lo[:, 2])
    tmax = np.fmin(np.fmin(hi[:, 0], hi[:, 1]), hi[:, 2])
    ok = np.isfinite(tmin) & (tmax >= tmin) & (tmin > 0)
    return np.where(ok, tmin, np.inf)


@dataclass
class Render:
    depth: np.ndarray  # meters, 0 where nothing is hit
    labels: np.ndarray
    static_labels: np.ndarray  # labels with actors removed


def _cuboid_hits(cuboid: Cuboid, origin, dirs, pose: Pose, intr: Intrinsics) -> np.ndarray:
    """Cuboid hit depths, tested only on pixels inside the projected hull when it lies in front."""
    uv, z = project(cuboid.corners(), intr, pose)
    if np.any(z <= 0):
        return _hit_cuboid(cuboid, origin, dirs)
    t = np.full(len(dirs), np.inf)
    u0, v0 = np.maximum(np.floor(uv.min(axis=0)).astype(int) - 1, 0)
    u1 = min(int(np.ceil(uv[:, 0].max())) + 2, intr.width)
    v1 = min(int(np.ceil(uv[:, 1].max())) + 2, intr.height)
    if u0 >= u1 or v0 >= v1:
        return t
    idx = (np.arange(v0, v1)[:, None] * intr.width + np.arange(u0, u1)[None, :]).reshape(-1)
    t[idx] = _hit_cuboid(cuboid, origin, dirs[idx])
    return t


def raycast(scene: SyntheticScene, pose: Pose, actor_cuboids=()) -> Render:
    """Noise-free nearest-hit depth and labels for one camera pose."""
    intr = scene.intrinsics
    origin, dirs = _rays(intr, pose)
    hits = [_hit_rect(r, origin, dirs) for r in scene.rects]
    hits += [_cuboid_hits(b.cuboid, origin, dirs, pose, intr) for b in scene.boxes]
    labels = [r.label for r in scene.rects] + [b.label for b in scene.boxes]
    tstack = np.vstack(hits) if hits else np.full((1, len(dirs)), np.inf)
    lab = np.asarray(labels or [LABEL_NONE])
    k_static = np.argmin(tstack, axis=0)
    t_static = tstack[k_static, np.arange(len(dirs))]
    static_labels = np.where(np.isfinite(t_static), lab[k_static], LABEL_NONE)
    t_best, best_labels = t_static, static_labels.copy()
    for cub in actor_cuboids:
        ta = _cuboid_hits(cub, origin, dirs, pose, intr)
        closer = ta < t_best
        t_best = np.where(closer, ta, t_best)
        best_labels[closer] = LABEL_ACTOR
    shape = (intr.height, intr.width)
    depth = np.where(np.isfinite(t_best), t_best, 0.0)
    return Render(depth.reshape(shape), best_labels.reshape(shape), static_labels.reshape(shape))


# -- detections ----------------------------------------------------------------


def hull_box(cuboid: Cuboid, pose: Pose, intr: Intrinsics):
    """Unclipped image bbox of the projected corners, or ``None`` if any corner is behind the camera."""
    uv, z = project(cuboid.corners(), intr, pose)
    if np.any(z <= 0):
        return None
    return (uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max() + 1, uv[:, 1].max() + 1)


def _clip(box, intr: Intrinsics):
    b = (max(box[0], 0.0), max(box[1], 0.0), min(box[2], float(intr.width)), min(box[3], float(intr.height)))
    return b if b[0] < b[2] and b[1] < b[3] else None


def _area(b) -> float:
    return max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)


def frame_detections(scene: SyntheticScene, pose: Pose, render: Render, actor_cuboids, rng: np.random.Generator):
    """Detections visible in one frame, with jitter and misses drawn from ``rng``.

    Random draws are made for every candidate in a fixed order, so the
    stream of a given seed does not depend on which candidates survive.
    """
    intr = scene.intrinsics
    out = []
    cands = [(a.class_id, cub, True, None) for a, cub in zip(scene.actors, actor_cuboids)]
    cands += [(b.class_id, b.cuboid, False, b.label) for b in scene.boxes if b.class_id]
    for class_id, cub, is_actor, label in cands:
        jitter = rng.normal(0.0, scene.noise.box_jitter_px, 4)
        missed = rng.random() < scene.noise.miss_probability
        raw = hull_box(cub, pose, intr)
        if raw is None or missed:
            continue
        clipped = _clip(raw, intr)
        if clipped is None:
            continue
        if is_actor:
            if int((render.labels == LABEL_ACTOR).sum()) < scene.min_actor_pixels:
                continue
        else:
            full = int((render.static_labels == label).sum())
            seen = int((render.labels == label).sum())
            truncated = 1.0 - _area(clipped) / _area(raw)
            if full == 0 or seen / full < scene.min_visible or truncated >= scene.max_truncated:
                continue
        box = _clip(np.asarray(clipped) + jitter, intr)
        if box is None:
            continue
        score = 0.9 if is_actor else 0.8
        out.append((class_id, score, box))
    return out


# -- writing -------------------------------------------------------------------

_PALETTE = {1: (150, 140, 120), 2: (200, 200, 190), 3: (180, 190, 200), 4: (190, 180, 200), 5: (120, 80, 50),
            LABEL_ACTOR: (220, 60, 60)}


def _colorize(labels: np.ndarray, depth: np.ndarray) -> np.ndarray:
    rgb = np.zeros(labels.shape + (3,), dtype=np.float64)
    for lab in np.unique(labels):
        base = _PALETTE.get(int(lab), ((37 * lab) % 256, (91 * lab) % 256, (173 * lab) % 256))
        rgb[labels == lab] = base
    shade = np.clip(1.2 - 0.1 * depth, 0.4, 1.0)
    return np.clip(rgb * shade[..., None], 0, 255).astype(np.uint8)


def _pose_line(ts: float, pose: Pose) -> str:
    inv = pose.inverse()
    q = Rotation.from_matrix(inv.rotation).as_quat()
    if q[3] < 0:
        q = -q
    t = inv.translation
    return f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} {q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}"


def generate_synthetic(scene: SyntheticScene, seed: int, out_dir: str | Path) -> dict:
    """Render a sequence to ``out_dir`` in TUM layout plus detections and a ground-truth manifest.

    Returns the manifest. Output bytes depend only on ``scene`` and ``seed``.
    """
    if scene.frames < 1:
        raise InputError("scene needs at least one frame")
    out = Path(out_dir)
    for sub in ("rgb", "depth", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    intr = scene.intrinsics
    rng = np.random.default_rng(seed)
    poses = [scene.pose(i) for i in range(scene.frames)]  # raises on a degenerate trajectory

    rgb_lines = ["# color images", "# timestamp filename"]
    depth_lines = ["# depth maps", "# timestamp filename"]
    gt_lines = ["# ground truth trajectory", "# timestamp tx ty tz qx qy qz qw"]
    det_lines = ["# timestamp class_id score u_min v_min u_max v_max"]
    actor_track = []
    for i, ts in enumerate(scene.timestamps()):
        pose = poses[i]
        actor_cubs = [a.cuboid_at(scene.phase(i)) for a in scene.actors]
        render = raycast(scene, pose, actor_cubs)
        z = render.depth
        noise = rng.normal(0.0, 1.0, z.shape) * scene.noise.depth_sigma_per_m * z
        raw = np.where(z > 0, np.rint((z + noise) * intr.depth_scale), 0)
        depth16 = np.clip(raw, 0, 65535).astype(np.uint16)
        name = f"{ts:.6f}.png"
        Image.fromarray(depth16).save(out / "depth" / name, compress_level=1)
        Image.fromarray(_colorize(render.labels, z)).save(out / "rgb" / name, compress_level=1)
        Image.fromarray(np.minimum(render.labels, 255).astype(np.uint8)).save(out / "labels" / name, compress_level=1)
        rgb_lines.append(f"{ts:.6f} rgb/{name}")
        depth_lines.append(f"{ts:.6f} depth/{name}")
        gt_lines.append(_pose_line(ts, pose))
        for class_id, score, box in frame_detections(scene, pose, render, actor_cubs, rng):
            det_lines.append(f"{ts:.6f} {class_id} {score:.2f} " + " ".join(f"{x:.2f}" for x in box))
        actor_track.append({
            "timestamp": round(float(ts), 6),
            "actors": [{"class_id": a.class_id, "rotation": c.rotation.tolist(),
                        "translation": c.translation.tolist(), "size": c.size.tolist()}
                       for a, c in zip(scene.actors, actor_cubs)],
        })

    write_intrinsics(out, intr)
    (out / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (out / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    (out / "groundtruth.txt").write_text("\n".join(gt_lines) + "\n")
    (out / "detections.txt").write_text("\n".join(det_lines) + "\n")
    table = next((b for b in scene.boxes if b.name == "table"), None)
    planes = [{"name": r.name, "label": r.label, "normal": r.plane.normal.tolist(), "offset": r.plane.offset}
              for r in scene.rects]
    if table is not None:
        top = table.center[2] + table.size[2] / 2
        planes.append({"name": "table_top", "label": table.label, "normal": [0.0, 0.0, 1.0], "offset": -top})
    manifest = {
        "seed": int(seed),
        "frames": scene.frames,
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                       "width": intr.width, "height": intr.height, "depth_scale": intr.depth_scale},
        "noise": asdict(scene.noise),
        "planes": planes,
        "objects": [{"name": b.name, "label": b.label, "class_id": b.class_id,
                     "rotation": b.cuboid.rotation.tolist(), "translation": list(b.center), "size": list(b.size)}
                    for b in scene.boxes if b.class_id],
        "static_boxes": [{"name": b.name, "label": b.label, "rotation": b.cuboid.rotation.tolist(),
                          "translation": list(b.center), "size": list(b.size)} for b in scene.boxes],
        "actor_label": LABEL_ACTOR,
        "actor_track": actor_track,
        "scene": scene.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_scene(path: str | Path | None) -> SyntheticScene:
    if path is None:
        return default_scene()
    p = Path(path)
    if not p.is_file():
        raise InputError(f"scene file not found: {p}")
    try:
        return SyntheticScene.from_dict(json.loads(p.read_text()))
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid scene file {p}: {exc}") from exc
