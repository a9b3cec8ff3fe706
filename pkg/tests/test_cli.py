import json
import subprocess
import sys

import pytest

from dymap.cli import main


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "out"
    assert main(["synth", "--seed", "3", "--frames", "15", "--out", str(data)]) == 0
    assert main(["run", "--dataset", str(data), "--out", str(out)]) == 0
    return data, out


def test_synth_writes_tum_layout(cli_run):
    data, _ = cli_run
    for name in ("depth.txt", "rgb.txt", "groundtruth.txt", "detections.txt", "camera.txt"):
        assert (data / name).is_file()
    assert json.loads((data / "manifest.json").read_text())["frames"] == 15


def test_run_writes_all_layers(cli_run):
    _, out = cli_run
    report = json.loads((out / "report.json").read_text())
    assert report["counts"]["frames"] == 15
    assert (out / "static_map.ply").is_file() and (out / "bundle").is_dir()


def test_export_reproduces_run_outputs(cli_run, tmp_path):
    _, out = cli_run
    assert main(["export", "--bundle", str(out / "bundle"), "--out", str(tmp_path)]) == 0
    for f in tmp_path.iterdir():
        assert f.read_bytes() == (out / f.name).read_bytes()


def test_export_subset(cli_run, tmp_path, capsys):
    _, out = cli_run
    assert main(["export", "--bundle", str(out / "bundle"), "--formats", "ply,objects", "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out.split()
    assert len(printed) >= 2 and all(p.startswith(str(tmp_path)) for p in printed)


def test_missing_dataset_exits_2(tmp_path, capsys):
    assert main(["run", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_format_exits_2(cli_run, tmp_path):
    _, out = cli_run
    assert main(["export", "--bundle", str(out / "bundle"), "--formats", "mesh", "--out", str(tmp_path)]) == 2


def test_unwritable_output_exits_3(cli_run, tmp_path, capsys):
    _, out = cli_run
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["export", "--bundle", str(out / "bundle"), "--out", str(blocker / "sub")]) == 3
    assert "cannot write" in capsys.readouterr().err


def test_bad_config_exits_2(cli_run, tmp_path):
    data, _ = cli_run
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no_such_key = 1\n")
    assert main(["run", "--dataset", str(data), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "dymap.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth" in res.stdout
