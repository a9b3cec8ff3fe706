import math

import numpy as np
import pytest
from PIL import Image

from dymap.config import Config
from dymap.geometry import InputError
from dymap.io import attach_detections, export, load_detections, load_intrinsics, load_tum
from dymap.pipeline import run_pipeline
from dymap.synthetic import CameraPath, NoiseModel, default_scene, generate_synthetic, raycast


def frozen_camera(s: float) -> CameraPath:
    """The default camera stopped at phase ``s`` of its sweep."""
    path = CameraPath()
    w = math.sin(2 * math.pi * path.cycles * s)
    return CameraPath(center=tuple(np.add(path.center, np.multiply(w, path.sweep))), sweep=(0.0, 0.0, 0.0),
                      target=tuple(np.add(path.target, np.multiply(w, path.target_sweep))),
                      target_sweep=(0.0, 0.0, 0.0))


def load_run(path, cfg):
    frames = load_tum(path)
    attach_detections(frames, load_detections(path / "detections.txt"), cfg.movable_classes)
    return run_pipeline(frames, load_intrinsics(path), cfg)


def test_empty_sequence_gives_empty_maps(tmp_path):
    b = run_pipeline([], load_intrinsics(tmp_path, Config()), Config())
    assert len(b.static_cloud) == 0 and len(b.octree) == 0 and b.planes == [] and b.objects == []
    counts = b.report["counts"]
    assert counts["frames"] == 0 and all(v == 0 for v in counts.values())


@pytest.mark.parametrize("s", [0.0, 0.13, 0.25, 0.37, 0.5, 0.67, 0.87])
@pytest.mark.parametrize("noise", [0.0, 0.01])
def test_single_static_frame_finds_visible_room_planes(tmp_path, s, noise):
    scene = default_scene(frames=1, actors=[], boxes=[], camera=frozen_camera(s),
                          noise=NoiseModel(noise, 0.0, 0.0))
    generate_synthetic(scene, 0, tmp_path)
    cfg = Config(enable_objects=False)
    b = load_run(tmp_path, cfg)
    pose = scene.pose(0)
    labels = raycast(scene, pose).static_labels
    visible = [r for r in scene.rects if (labels == r.label).sum() >= cfg.plane_min_pixels]
    assert len(b.planes) == len(visible)
    for r in visible:
        n = r.plane.normal
        assert any(abs(p.params.normal @ n) > math.cos(math.radians(2.0)) for p in b.planes)


def test_keyframe_subsetting_monotone(short_sequence):
    path, _ = short_sequence
    every = load_run(path, Config(keyframe_interval=1))
    fifth = load_run(path, Config(keyframe_interval=5))
    assert every.report["counts"]["keyframes"] >= fifth.report["counts"]["keyframes"]
    assert every.report["counts"]["plane_observations"] >= fifth.report["counts"]["plane_observations"]


def test_pipeline_deterministic(short_sequence, tmp_path):
    path, _ = short_sequence
    outs = []
    for k in range(2):
        b = load_run(path, Config())
        files = export(b, tmp_path / str(k))
        outs.append({f.name: f.read_bytes() for f in files})
    assert outs[0] == outs[1]


def test_planes_disabled(short_sequence):
    path, _ = short_sequence
    b = load_run(path, Config(enable_planes=False, enable_objects=False))
    assert b.planes == [] and b.report["counts"]["plane_observations"] == 0
    assert len(b.static_cloud) > 0


def test_rejects_non_increasing_timestamps(short_sequence):
    path, _ = short_sequence
    frames = load_tum(path)[:3]
    frames[2].timestamp = frames[1].timestamp
    with pytest.raises(InputError):
        run_pipeline(frames, load_intrinsics(path), Config())


def test_rejects_depth_shape_mismatch(short_sequence, tmp_path):
    path, _ = short_sequence
    frames = load_tum(path)[:2]
    bad = tmp_path / "bad.png"
    Image.fromarray(np.full((10, 10), 10000, np.uint16)).save(bad)
    frames[0].depth_path = bad
    with pytest.raises(InputError):
        run_pipeline(frames, load_intrinsics(path), Config())


def test_unreadable_depth_aborts(short_sequence, tmp_path):
    path, _ = short_sequence
    frames = load_tum(path)[:2]
    frames[0].depth_path = tmp_path / "missing.png"
    with pytest.raises(InputError):
        run_pipeline(frames, load_intrinsics(path), Config())


def test_report_counts_consistent(short_sequence):
    path, manifest = short_sequence
    b = load_run(path, Config())
    c = b.report["counts"]
    assert c["frames"] == manifest["frames"]
    assert c["static_points"] == len(b.static_cloud) and c["octree_leaves"] == len(b.octree)
    assert c["planes"] == len(b.planes) and c["objects"] == len(b.objects)
    assert c["failed_keyframes"] == 0
