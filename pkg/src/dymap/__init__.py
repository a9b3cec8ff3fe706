"""Multi-level static maps of dynamic RGB-D scenes."""

from .config import Config, load_config
from .geometry import DegenerateInputError, InputError, Intrinsics, PlaneParams, PointCloud, Pose
from .io import MapBundle, OutputError, export, load_bundle, load_tum, save_bundle
from .object_param import Cuboid, parameterize
from .pipeline import run_pipeline
from .synthetic import default_scene, generate_synthetic

__all__ = [
    "Config",
    "Cuboid",
    "DegenerateInputError",
    "InputError",
    "Intrinsics",
    "MapBundle",
    "OutputError",
    "PlaneParams",
    "PointCloud",
    "Pose",
    "default_scene",
    "export",
    "generate_synthetic",
    "load_bundle",
    "load_config",
    "load_tum",
    "parameterize",
    "run_pipeline",
    "save_bundle",
]
