"""Command line entry point: ``dymap run | synth | export``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .geometry import DegenerateInputError, InputError
from .io import (
    EXPORT_FORMATS,
    OutputError,
    attach_detections,
    export,
    load_bundle,
    load_detections,
    load_intrinsics,
    load_tum,
    save_bundle,
)
from .pipeline import run_pipeline
from .synthetic import generate_synthetic, load_scene

logger = logging.getLogger("dymap")


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    frames = load_tum(args.dataset, cfg.pose_time_tolerance)
    dataset = Path(args.dataset)
    det_path = Path(args.detections) if args.detections else dataset / "detections.txt"
    attached = attach_detections(frames, load_detections(det_path), cfg.movable_classes,
                                 cfg.detection_time_tolerance)
    logger.info("%d frames, %d detections attached", len(frames), attached)
    bundle = run_pipeline(frames, load_intrinsics(dataset, cfg), cfg)
    out = Path(args.out)
    save_bundle(bundle, out / "bundle")
    written = export(bundle, out, EXPORT_FORMATS)
    counts = bundle.report["counts"]
    logger.info("map: %s", ", ".join(f"{k}={v}" for k, v in counts.items()))
    logger.info("timings (s): %s", json.dumps(bundle.report["timings"]))
    for p in written:
        print(p)
    return 0


def _cmd_synth(args) -> int:
    scene = load_scene(args.scene)
    if args.frames is not None:
        scene.frames = args.frames
    manifest = generate_synthetic(scene, args.seed, args.out)
    logger.info("wrote %d frames to %s", manifest["frames"], args.out)
    print(args.out)
    return 0


def _cmd_export(args) -> int:
    bundle = load_bundle(args.bundle)
    out = Path(args.out) if args.out else Path(args.bundle)
    for p in export(bundle, out, args.formats):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dymap", description="Multi-level static mapping of dynamic RGB-D scenes.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug output")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="build maps from a TUM-layout sequence")
    run.add_argument("--dataset", required=True, help="directory with depth.txt and groundtruth.txt")
    run.add_argument("--detections", help="detection sidecar file (default: <dataset>/detections.txt)")
    run.add_argument("--config", help="key = value configuration file")
    run.add_argument("--out", required=True, help="output directory")
    run.set_defaults(func=_cmd_run)

    synth = sub.add_parser("synth", help="render a synthetic dynamic sequence with ground truth")
    synth.add_argument("--scene", help="scene JSON (default: built-in room)")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--frames", type=int, help="override the scene's frame count")
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=_cmd_synth)

    exp = sub.add_parser("export", help="re-export layers of a saved map bundle")
    exp.add_argument("--bundle", required=True, help="bundle directory written by 'run' (<out>/bundle)")
    exp.add_argument("--formats", default=",".join(EXPORT_FORMATS),
                     help=f"comma-separated subset of {','.join(EXPORT_FORMATS)}")
    exp.add_argument("--out", help="output directory (default: the bundle directory)")
    exp.set_defaults(func=_cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InputError, DegenerateInputError) as exc:
        print(f"dymap: error: {exc}", file=sys.stderr)
        return 2
    except OutputError as exc:
        print(f"dymap: cannot write output: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"dymap: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
