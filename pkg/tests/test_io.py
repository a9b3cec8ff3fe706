import json

import numpy as np
import pytest
from PIL import Image

from dymap.config import Config, format_config, load_config, parse_config
from dymap.geometry import InputError, PointCloud, Pose
from dymap.io import (
    MapBundle,
    OutputError,
    attach_detections,
    export,
    load_bundle,
    load_detections,
    load_intrinsics,
    load_tum,
    pose_from_tum,
    read_octree_centers,
    read_ply,
    save_bundle,
    write_ply,
)
from dymap.static_map import build_octree


def write_sequence(root, depth_stamps, pose_stamps):
    (root / "depth").mkdir()
    lines = []
    for ts in depth_stamps:
        Image.fromarray(np.full((4, 6), 5000, np.uint16)).save(root / "depth" / f"{ts:.3f}.png")
        lines.append(f"{ts:.3f} depth/{ts:.3f}.png")
    (root / "depth.txt").write_text("# depth\n" + "\n".join(lines) + "\n")
    gt = [f"{ts:.3f} 0 0 0 0 0 0 1" for ts in pose_stamps]
    (root / "groundtruth.txt").write_text("# timestamp tx ty tz qx qy qz qw\n" + "\n".join(gt) + "\n")


def test_load_tum_associates_within_window(tmp_path):
    write_sequence(tmp_path, [1.000, 2.000], [1.004, 2.050])
    frames = load_tum(tmp_path)
    assert [f.timestamp for f in frames] == [1.0]
    assert np.allclose(frames[0].pose.rotation, np.eye(3)) and np.allclose(frames[0].pose.translation, 0)
    depth = frames[0].load_depth()
    assert depth.dtype == np.uint16 and depth.shape == (4, 6) and np.all(depth == 5000)


def test_load_tum_errors(tmp_path):
    with pytest.raises(InputError):
        load_tum(tmp_path)
    write_sequence(tmp_path, [1.0], [3.0])
    with pytest.raises(InputError):
        load_tum(tmp_path)


def test_pose_from_tum_inverts_camera_to_world():
    s = np.sqrt(0.5)
    pose = pose_from_tum(1.0, 2.0, 3.0, 0, 0, s, s)  # 90 degrees about z
    assert np.allclose(pose.camera_center, [1, 2, 3])
    assert np.allclose(pose.apply([[1, 3, 3]]), [[1, 0, 0]])  # camera x axis points along world y


def test_detections_parse_and_attach(tmp_path):
    p = tmp_path / "det.txt"
    p.write_text("# header\n1.000 person 0.9 10 20 50 90\n1.010 monitor 0.8 0 0 30 30\n5.0 cup 0.5 1 1 2 2\n")
    dets = load_detections(p)
    assert dets[0] == (1.0, "person", 0.9, (10.0, 20.0, 50.0, 90.0))
    write_sequence(tmp_path, [1.0], [1.0])
    frames = load_tum(tmp_path)
    assert attach_detections(frames, dets) == 2
    assert [d.movable for d in frames[0].detections] == [True, False]
    p.write_text("1.0 person 0.9 10 20\n")
    with pytest.raises(InputError):
        load_detections(p)
    with pytest.raises(InputError):
        load_detections(tmp_path / "missing.txt")


def test_intrinsics_from_camera_file_or_config(tmp_path):
    (tmp_path / "camera.txt").write_text("fx = 100\nfy = 100\ncx = 3\ncy = 2\nwidth = 6\nheight = 4\n")
    intr = load_intrinsics(tmp_path)
    assert intr.fx == 100 and intr.shape == (4, 6) and intr.depth_scale == 5000
    other = tmp_path / "sub"
    other.mkdir()
    assert load_intrinsics(other, Config()).width == 640
    with pytest.raises(InputError):
        load_intrinsics(other)


def test_config_parse_and_round_trip(tmp_path):
    cfg = parse_config("# comment\nplane_d_th = 0.07\nt_familywise = false\nmovable_classes = person, dog\n"
                       "size_prior.cup = 0.01 0.2\n")
    assert cfg.plane_d_th == 0.07 and cfg.t_familywise is False
    assert cfg.movable_classes == ("person", "dog")
    assert cfg.size_prior["cup"] == ((0.01, 0.2),) * 3
    assert Config().plane_d_th == 0.05  # defaults untouched
    assert parse_config(format_config(cfg)) == cfg
    for bad in ("nonsense = 1", "plane_d_th = abc", "no equals sign"):
        with pytest.raises(InputError):
            parse_config(bad)
    path = tmp_path / "c.cfg"
    path.write_text("seed = 3\n")
    assert load_config(path).seed == 3 and load_config(None) == Config()
    with pytest.raises(InputError):
        load_config(tmp_path / "missing.cfg")


def test_default_thresholds():
    cfg = Config()
    assert (cfg.proj_iou_th, cfg.motion_iou_th, cfg.shared_info_th) == (0.3, 0.3, 0.5)
    assert (cfg.t_alpha, cfg.t_min_obs) == (0.05, 5)
    assert (cfg.plane_beta_deg, cfg.plane_d_th, cfg.plane_point_th, cfg.plane_ratio_th) == (10.0, 0.05, 0.03, 0.6)
    assert (cfg.iforest_trees, cfg.iforest_subsample, cfg.iforest_threshold) == (100, 256, 0.65)
    assert (cfg.accept_history, cfg.accept_iou_slack, cfg.expand_limit, cfg.seed) == (10, 0.05, 50, 0)


def test_ply_round_trip_exact(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(1000, 3)), rng.integers(0, 256, (1000, 3)).astype(np.uint8))
    write_ply(tmp_path / "a.ply", cloud)
    back = read_ply(tmp_path / "a.ply")
    assert np.array_equal(back.points, cloud.points) and np.array_equal(back.colors, cloud.colors)
    write_ply(tmp_path / "b.ply", PointCloud([[1.0, 2.0, 3.0]]))
    assert b"element vertex 1\n" in (tmp_path / "b.ply").read_bytes()
    assert np.array_equal(read_ply(tmp_path / "b.ply").points, [[1.0, 2.0, 3.0]])


def test_export_empty_bundle(tmp_path):
    written = export(MapBundle.empty(), tmp_path)
    assert {p.name for p in written} == {"static_map.ply", "octree.txt", "planes.json", "planes.ply",
                                         "objects.json", "objects.ply", "report.json"}
    assert len(read_ply(tmp_path / "static_map.ply")) == 0
    assert json.loads((tmp_path / "planes.json").read_text()) == []
    assert json.loads((tmp_path / "objects.json").read_text()) == []
    assert len(read_octree_centers(tmp_path / "octree.txt")[1]) == 0


def test_export_rejects_unknown_format_and_unwritable_dir(tmp_path):
    with pytest.raises(InputError):
        export(MapBundle.empty(), tmp_path, "ply,bogus")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OutputError):
        export(MapBundle.empty(), blocker / "out")


def test_octree_export_centers(tmp_path):
    pts = np.array([[0.01, 0.01, 0.01], [0.2, 0.3, 0.41]])
    tree = build_octree(PointCloud(pts), 0.05)
    export(MapBundle(PointCloud(pts), tree, [], [], {}), tmp_path, ["voxels"])
    res, centers = read_octree_centers(tmp_path / "octree.txt")
    assert res == 0.05
    assert np.allclose(np.sort(centers, axis=0), np.sort((np.floor(pts / 0.05) + 0.5) * 0.05, axis=0))


def test_bundle_round_trip_reexports_identically(short_sequence, tmp_path):
    from dymap.pipeline import run_pipeline

    root, _ = short_sequence
    frames = load_tum(root)
    attach_detections(frames, load_detections(root / "detections.txt"))
    bundle = run_pipeline(frames, load_intrinsics(root))
    export(bundle, tmp_path / "a")
    save_bundle(bundle, tmp_path / "bundle")
    export(load_bundle(tmp_path / "bundle"), tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name
    with pytest.raises(InputError):
        load_bundle(tmp_path / "a")
