"""Pipeline configuration: a flat ``key = value`` text file mapped onto a dataclass."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import InputError

# per-class (min, max) bounds on the sorted (l, w, h) dimensions
DEFAULT_SIZE_PRIORS: dict[str, tuple[tuple[float, float], ...]] = {
    "monitor": ((0.25, 1.2), (0.04, 0.8), (0.01, 0.5)),
    "book": ((0.08, 0.5), (0.05, 0.4), (0.005, 0.25)),
    "keyboard": ((0.2, 0.7), (0.05, 0.3), (0.005, 0.12)),
    "chair": ((0.3, 1.4), (0.3, 1.0), (0.2, 0.9)),
    "bottle": ((0.1, 0.5), (0.03, 0.3), (0.02, 0.3)),
    "cup": ((0.04, 0.3), (0.03, 0.3), (0.02, 0.3)),
    "printer": ((0.25, 0.7), (0.15, 0.5), (0.08, 0.4)),
    "box": ((0.1, 0.6), (0.08, 0.5), (0.05, 0.5)),
    "speaker": ((0.15, 0.6), (0.05, 0.45), (0.05, 0.45)),
}
DEFAULT_PRIOR = ((0.02, 3.0),) * 3


@dataclass
class Config:
    seed: int = 0
    depth_min: float = 0.1
    depth_max: float = 8.0
    depth_noise_per_m: float = 0.01
    detection_time_tolerance: float = 0.02
    pose_time_tolerance: float = 0.02

    # used when the dataset directory has no camera.txt (TUM freiburg defaults)
    camera_fx: float = 525.0
    camera_fy: float = 525.0
    camera_cx: float = 319.5
    camera_cy: float = 239.5
    camera_width: int = 640
    camera_height: int = 480
    depth_scale: float = 5000.0

    keyframe_interval: int = 5
    keyframe_translation: float = 0.1
    keyframe_rotation_deg: float = 10.0

    movable_classes: tuple[str, ...] = ("person",)
    tracker_iou: float = 0.3
    tracker_max_misses: int = 3
    tracker_velocity_window: int = 5
    fg_stride: int = 4
    fg_eps: float = 0.1
    fg_min_pts: int = 8
    fg_min_fraction: float = 0.2
    expand_margin: float = 0.25
    expand_min_fraction: float = 0.1
    expand_limit: int = 50

    leaf_size: float = 0.02
    octree_resolution: float = 0.05
    min_points_per_voxel: int = 1

    enable_planes: bool = True
    plane_cell_size: int = 16
    plane_cell_rms: float = 0.03
    plane_angle_deg: float = 15.0
    plane_grow_distance: float = 0.03
    plane_min_pixels: int = 500
    plane_inlier_tol: float = 0.03
    plane_cell_min_valid: float = 0.5
    plane_max_depth: float = 6.0
    plane_min_inlier_ratio: float = 0.8
    plane_max_box_overlap: float = 0.5
    plane_beta_deg: float = 10.0
    plane_d_th: float = 0.05
    plane_point_th: float = 0.03
    plane_ratio_th: float = 0.6
    plane_leaf_size: float = 0.02
    merge_interval: int = 20

    enable_objects: bool = True
    object_stride: int = 1
    object_eps: float = 0.05
    object_min_pts: int = 10
    object_min_points: int = 50
    object_plane_sigma: float = 2.0
    object_max_box_overlap: float = 0.2
    object_leaf_size: float = 0.01
    correction_aspect: float = 0.85
    correction_eig_ratio: float = 0.85
    correction_cluster_fraction: float = 0.2

    proj_iou_th: float = 0.3
    motion_iou_th: float = 0.3
    shared_info_th: float = 0.5
    t_alpha: float = 0.05
    t_min_obs: int = 5
    t_familywise: bool = True

    support_plane_dist: float = 0.1
    support_below: float = 0.01
    outlier_diag_factor: float = 1.5
    iforest_trees: int = 100
    iforest_subsample: int = 256
    iforest_threshold: float = 0.65
    accept_history: int = 10
    accept_iou_slack: float = 0.05
    size_prior: dict = field(default_factory=lambda: dict(DEFAULT_SIZE_PRIORS))

    def prior_for(self, class_id: str) -> tuple[tuple[float, float], ...]:
        return self.size_prior.get(class_id, DEFAULT_PRIOR)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise InputError(f"not a boolean: {text!r}")


def _parse_prior(text: str) -> tuple[tuple[float, float], ...]:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) == 2:
        return ((vals[0], vals[1]),) * 3
    if len(vals) == 6:
        return tuple((vals[i], vals[i + 1]) for i in (0, 2, 4))
    raise InputError("size prior takes 2 or 6 numbers")


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines (``#`` comments) over the defaults."""
    cfg = dataclasses.replace(base) if base is not None else Config()
    cfg.size_prior = dict(cfg.size_prior)
    fields = {f.name: f for f in dataclasses.fields(Config)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("size_prior."):
            cfg.size_prior[key.split(".", 1)[1]] = _parse_prior(value)
            continue
        if key not in fields or key == "size_prior":
            raise InputError(f"line {lineno}: unknown key {key!r}")
        default = getattr(Config(), key)
        try:
            if isinstance(default, bool):
                parsed = _parse_bool(value)
            elif isinstance(default, int):
                parsed = int(value)
            elif isinstance(default, float):
                parsed = float(value)
            elif isinstance(default, tuple):
                parsed = tuple(v for v in value.replace(",", " ").split())
            else:
                parsed = value
        except ValueError as exc:
            raise InputError(f"line {lineno}: bad value for {key}: {value!r}") from exc
        setattr(cfg, key, parsed)
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    return parse_config(p.read_text())


def format_config(cfg: Config) -> str:
    lines = []
    for f in dataclasses.fields(Config):
        value = getattr(cfg, f.name)
        if f.name == "size_prior":
            for cls in sorted(value):
                lines.append(f"size_prior.{cls} = " + " ".join(f"{a:g} {b:g}" for a, b in value[cls]))
        elif isinstance(value, tuple):
            lines.append(f"{f.name} = " + ",".join(value))
        elif isinstance(value, bool):
            lines.append(f"{f.name} = {str(value).lower()}")
        else:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
