"""Dataset ingestion and map serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .detection import Detection
from .geometry import InputError, Intrinsics, PlaneParams, PointCloud, Pose
from .object_map import ObjectInstance, ObservationRecord
from .object_param import Cuboid
from .planes import PlaneInstance, PointMoments
from .static_map import VoxelOctree


class OutputError(OSError):
    """An export target could not be written."""


@dataclass
class FrameRecord:
    timestamp: float
    depth_path: Path
    pose: Pose
    color_path: Path | None = None
    detections: list = field(default_factory=list)

    def load_depth(self) -> np.ndarray:
        return read_depth(self.depth_path)

    def load_color(self) -> np.ndarray | None:
        if self.color_path is None or not self.color_path.is_file():
            return None
        return np.asarray(Image.open(self.color_path).convert("RGB"))


def load_intrinsics(directory: str | Path, cfg=None) -> Intrinsics:
    """Camera parameters from ``camera.txt`` in the dataset, else from the config."""
    p = Path(directory) / "camera.txt"
    if p.is_file():
        vals = {}
        for line in p.read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, _, value = line.partition("=")
                vals[key.strip()] = float(value)
        try:
            return Intrinsics(vals["fx"], vals["fy"], vals["cx"], vals["cy"], int(vals["width"]),
                              int(vals["height"]), vals.get("depth_scale", 5000.0))
        except KeyError as exc:
            raise InputError(f"{p}: missing {exc.args[0]}") from exc
    if cfg is None:
        raise InputError(f"no camera.txt in {directory} and no config given")
    return Intrinsics(cfg.camera_fx, cfg.camera_fy, cfg.camera_cx, cfg.camera_cy, cfg.camera_width,
                      cfg.camera_height, cfg.depth_scale)


def write_intrinsics(directory: str | Path, intr: Intrinsics) -> None:
    lines = [f"{k} = {getattr(intr, k)!r}" for k in ("fx", "fy", "cx", "cy", "width", "height", "depth_scale")]
    _write_text(Path(directory) / "camera.txt", "\n".join(lines) + "\n")


def read_depth(path: str | Path) -> np.ndarray:
    img = np.asarray(Image.open(path))
    if img.ndim != 2:
        raise InputError(f"depth image {path} is not single-channel")
    return img.astype(np.uint16)


def _read_listing(path: Path) -> list[list[str]]:
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            rows.append(line.split())
    return rows


def pose_from_tum(tx, ty, tz, qx, qy, qz, qw) -> Pose:
    """World-to-camera pose from a camera-to-world TUM trajectory entry."""
    R_wc = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
    return Pose(R_wc, [tx, ty, tz]).inverse()


def _nearest(stamps: np.ndarray, t: float) -> int:
    i = int(np.searchsorted(stamps, t))
    cands = [k for k in (i - 1, i) if 0 <= k < len(stamps)]
    return min(cands, key=lambda k: (abs(stamps[k] - t), k))


def load_tum(directory: str | Path, tolerance: float = 0.02) -> list[FrameRecord]:
    """Depth frames with the nearest ground-truth pose within ``tolerance`` seconds."""
    root = Path(directory)
    depth_txt, gt_txt = root / "depth.txt", root / "groundtruth.txt"
    for p in (depth_txt, gt_txt):
        if not p.is_file():
            raise InputError(f"missing {p.name} in {root}")
    gt = sorted((float(r[0]), [float(x) for x in r[1:8]]) for r in _read_listing(gt_txt) if len(r) >= 8)
    depth = sorted((float(r[0]), r[1]) for r in _read_listing(depth_txt) if len(r) >= 2)
    rgb_txt = root / "rgb.txt"
    rgb = sorted((float(r[0]), r[1]) for r in _read_listing(rgb_txt) if len(r) >= 2) if rgb_txt.is_file() else []
    if not gt or not depth:
        raise InputError(f"no frames could be associated in {root}")
    gt_t = np.array([g[0] for g in gt])
    rgb_t = np.array([r[0] for r in rgb])
    frames: list[FrameRecord] = []
    for ts, rel in depth:
        k = _nearest(gt_t, ts)
        if abs(gt_t[k] - ts) > tolerance or (frames and ts <= frames[-1].timestamp):
            continue
        color = None
        if len(rgb_t):
            c = _nearest(rgb_t, ts)
            if abs(rgb_t[c] - ts) <= tolerance:
                color = root / rgb[c][1]
        frames.append(FrameRecord(ts, root / rel, pose_from_tum(*gt[k][1]), color))
    if not frames:
        raise InputError(f"no frames could be associated in {root}")
    return frames


def load_detections(path: str | Path) -> list[tuple[float, str, float, tuple]]:
    """Parse ``timestamp class_id score u_min v_min u_max v_max`` lines."""
    p = Path(path)
    if not p.is_file():
        raise InputError(f"detections file not found: {p}")
    out = []
    for lineno, row in enumerate(_read_listing(p), 1):
        if len(row) != 7:
            raise InputError(f"{p}:{lineno}: expected 7 fields, got {len(row)}")
        try:
            ts, score = float(row[0]), float(row[2])
            box = tuple(float(x) for x in row[3:7])
        except ValueError as exc:
            raise InputError(f"{p}:{lineno}: {exc}") from exc
        out.append((ts, row[1], score, box))
    return out


def attach_detections(frames: list[FrameRecord], detections, movable_classes=("person",),
                      tolerance: float = 0.02) -> int:
    """Assign each detection to the nearest frame in time; returns how many were attached."""
    if not frames:
        return 0
    stamps = np.array([f.timestamp for f in frames])
    movable = set(movable_classes)
    attached = 0
    for ts, cls, score, box in detections:
        k = _nearest(stamps, ts)
        if abs(stamps[k] - ts) > tolerance or not (box[0] < box[2] and box[1] < box[3]):
            continue
        frames[k].detections.append(Detection(cls, score, box, movable=cls in movable))
        attached += 1
    return attached


# -- PLY -----------------------------------------------------------------------


def write_ply(path: str | Path, cloud: PointCloud) -> None:
    """Binary little-endian PLY: double x, y, z and, when present, uchar red, green, blue."""
    colored = cloud.has_colors
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}",
              "property double x", "property double y", "property double z"]
    if colored:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if colored:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.zeros(len(cloud), dtype=fields)
    for k, name in enumerate("xyz"):
        rec[name] = cloud.points[:, k]
    if colored:
        for k, name in enumerate(("red", "green", "blue")):
            rec[name] = cloud.colors[:, k]
    try:
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            f.write(rec.tobytes())
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


_PLY_TYPES = {"double": "<f8", "float": "<f4", "uchar": "u1", "int": "<i4", "uint": "<u4", "short": "<i2",
              "ushort": "<u2", "char": "i1", "float64": "<f8", "float32": "<f4", "uint8": "u1"}


def read_ply(path: str | Path) -> PointCloud:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise InputError(f"{path} is not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise InputError(f"{path}: only binary little-endian PLY is supported")
    count, props, in_vertex = 0, [], False
    for line in header:
        parts = line.split()
        if parts[:1] == ["element"]:
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[:1] == ["property"] and in_vertex:
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    rec = np.frombuffer(data, dtype=props, count=count, offset=end + len(b"end_header\n"))
    points = np.column_stack([rec[a].astype(np.float64) for a in "xyz"]) if count else np.zeros((0, 3))
    names = {p[0] for p in props}
    colors = None
    if {"red", "green", "blue"} <= names:
        colors = np.column_stack([rec[c] for c in ("red", "green", "blue")]).astype(np.uint8).reshape(-1, 3)
    return PointCloud(points, colors)


# -- map records -----------------------------------------------------------------


def _floats(a) -> list:
    return [float(x) for x in np.asarray(a, dtype=np.float64).reshape(-1)]


def write_octree(path: str | Path, octree: VoxelOctree) -> None:
    lines = [f"# resolution {octree.resolution!r}", f"# depth {octree.depth}", f"# leaves {len(octree)}"]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in octree.occupied_centers().tolist()]
    _write_text(path, "\n".join(lines) + "\n")


def read_octree_centers(path: str | Path) -> tuple[float, np.ndarray]:
    resolution, rows = None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# resolution"):
            resolution = float(line.split()[2])
        elif line and not line.startswith("#"):
            rows.append([float(v) for v in line.split()])
    if resolution is None:
        raise InputError(f"{path}: missing resolution header")
    return resolution, np.array(rows, dtype=np.float64).reshape(-1, 3)


def plane_records(planes: list[PlaneInstance]) -> list[dict]:
    return [{"id": p.id, "normal": _floats(p.params.normal), "offset": float(p.params.offset),
             "observations": p.observations, "inliers": len(p.inliers)} for p in planes]


def object_records(objects: list[ObjectInstance]) -> list[dict]:
    return [{"id": o.id, "class_id": o.class_id, "rotation": _floats(o.cuboid.rotation),
             "translation": _floats(o.cuboid.translation), "size": _floats(o.cuboid.size),
             "observations": o.observations, "map_points": len(o.points),
             "ellipsoid_semi_axes": _floats(o.cuboid.size / 2)} for o in objects]


def _write_text(path: str | Path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def _write_json(path: str | Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- bundles ---------------------------------------------------------------------


@dataclass
class MapBundle:
    static_cloud: PointCloud
    octree: VoxelOctree
    planes: list
    objects: list
    report: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, resolution: float = 0.05) -> "MapBundle":
        return cls(PointCloud.empty(), VoxelOctree.empty(resolution), [], [], {})


EXPORT_FORMATS = ("ply", "voxels", "planes", "objects", "report")

_PLANE_COLORS = np.array([[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
                          [145, 30, 180], [70, 240, 240], [240, 50, 230]], dtype=np.uint8)


def export(bundle: MapBundle, out_dir: str | Path, formats=EXPORT_FORMATS) -> list[Path]:
    """Write the requested map layers into ``out_dir``; returns the written paths.

    Exported files hold only deterministic content; wall-clock timings are
    left out of the exported report.
    """
    formats = [f.strip() for f in (formats.split(",") if isinstance(formats, str) else formats) if f.strip()]
    unknown = set(formats) - set(EXPORT_FORMATS)
    if unknown:
        raise InputError(f"unknown export formats: {sorted(unknown)}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create {out}: {exc}") from exc
    written = []
    if "ply" in formats:
        write_ply(out / "static_map.ply", bundle.static_cloud)
        written.append(out / "static_map.ply")
    if "voxels" in formats:
        write_octree(out / "octree.txt", bundle.octree)
        written.append(out / "octree.txt")
    if "planes" in formats:
        _write_json(out / "planes.json", plane_records(bundle.planes))
        written.append(out / "planes.json")
        pts = [p.inliers for p in bundle.planes]
        cols = [np.tile(_PLANE_COLORS[k % len(_PLANE_COLORS)], (len(p.inliers), 1)) for k, p in enumerate(bundle.planes)]
        cloud = PointCloud(np.vstack(pts), np.vstack(cols)) if pts else PointCloud.empty()
        write_ply(out / "planes.ply", cloud)
        written.append(out / "planes.ply")
    if "objects" in formats:
        _write_json(out / "objects.json", object_records(bundle.objects))
        written.append(out / "objects.json")
        pts = [o.points for o in bundle.objects]
        write_ply(out / "objects.ply", PointCloud(np.vstack(pts)) if pts else PointCloud.empty())
        written.append(out / "objects.ply")
    if "report" in formats:
        report = {k: v for k, v in bundle.report.items() if k != "timings"}
        _write_json(out / "report.json", report)
        written.append(out / "report.json")
    return written


def save_bundle(bundle: MapBundle, directory: str | Path) -> Path:
    """Persist a bundle so that :func:`load_bundle` restores every exported layer."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create {d}: {exc}") from exc
    write_ply(d / "static_map.ply", bundle.static_cloud)
    oc = bundle.octree
    arrays = {"octree_origin": oc.origin_key, "octree_leaves": oc.levels[-1]}
    planes_meta, objects_meta = [], []
    for k, p in enumerate(bundle.planes):
        arrays[f"plane{k}_inliers"] = p.inliers
        arrays[f"plane{k}_boundary"] = p.boundary
        mom = p.point_moments()
        arrays[f"plane{k}_moments"] = np.concatenate([[mom.count], mom.mean, mom.scatter.ravel()])
        planes_meta.append({"id": p.id, "normal": _floats(p.params.normal), "offset": float(p.params.offset),
                            "observations": p.observations, "fit_tol": p.fit_tol})
    for k, o in enumerate(bundle.objects):
        arrays[f"object{k}_points"] = o.points
        arrays[f"object{k}_centroids"] = np.asarray(o.centroids, dtype=np.float64).reshape(-1, 3)
        objects_meta.append({
            "id": o.id, "class_id": o.class_id, "rotation": _floats(o.cuboid.rotation),
            "translation": _floats(o.cuboid.translation), "size": _floats(o.cuboid.size),
            "records": [{"keyframe": r.keyframe, "box": list(r.box), "rotation": _floats(r.pose.rotation),
                         "translation": _floats(r.pose.translation)} for r in o.records],
            "last_box": None if o.last_box is None else list(o.last_box),
            "box_velocity": _floats(o.box_velocity), "last_keyframe": o.last_keyframe,
            "rejected_updates": o.rejected_updates,
        })
    np.savez(d / "arrays.npz", **arrays)
    meta = {"octree": {"resolution": oc.resolution, "depth": oc.depth}, "planes": planes_meta,
            "objects": objects_meta, "report": bundle.report}
    _write_json(d / "bundle.json", meta)
    return d


def load_bundle(directory: str | Path) -> MapBundle:
    d = Path(directory)
    if not (d / "bundle.json").is_file():
        raise InputError(f"{d} does not contain a map bundle")
    meta = json.loads((d / "bundle.json").read_text())
    arrays = np.load(d / "arrays.npz")
    oc_meta = meta["octree"]
    octree = VoxelOctree.from_leaf_codes(oc_meta["resolution"], arrays["octree_origin"], int(oc_meta["depth"]),
                                         arrays["octree_leaves"])
    planes = []
    for k, p in enumerate(meta["planes"]):
        mom = arrays[f"plane{k}_moments"]
        planes.append(PlaneInstance(p["id"], PlaneParams(p["normal"], p["offset"]), arrays[f"plane{k}_inliers"],
                                    arrays[f"plane{k}_boundary"], p["observations"], p["fit_tol"],
                                    PointMoments(float(mom[0]), mom[1:4].copy(), mom[4:].reshape(3, 3).copy())))
    objects = []
    for k, o in enumerate(meta["objects"]):
        records = [ObservationRecord(r["keyframe"], tuple(r["box"]),
                                     Pose(np.reshape(r["rotation"], (3, 3)), r["translation"])) for r in o["records"]]
        objects.append(ObjectInstance(
            id=o["id"], class_id=o["class_id"],
            cuboid=Cuboid(np.reshape(o["rotation"], (3, 3)), o["translation"], o["size"]),
            points=arrays[f"object{k}_points"], centroids=list(arrays[f"object{k}_centroids"]),
            records=records, last_box=None if o["last_box"] is None else tuple(o["last_box"]),
            box_velocity=np.asarray(o["box_velocity"]), last_keyframe=o["last_keyframe"],
            rejected_updates=o["rejected_updates"],
        ))
    return MapBundle(read_ply(d / "static_map.ply"), octree, planes, objects, meta["report"])
