"""Register photographs to a known triangle mesh.

Anchor images are posed from 2D-3D mesh annotations; the rest join through
homography transfer or PnP on triangulated tracks, and everything is refined
by bundle adjustment that keeps anchor poses fixed.
"""

from .bundle import BAMode, BundleProblem, BundleResult, bundle_adjust
from .camera import Camera, Intrinsics, Pose, pixel_ray, project
from .evaluate import compare_cameras
from .lm import LMOptions, ResidualProblem, lm_minimize
from .mesh import TriangleMesh, intersect_ray_mesh
from .pipeline import PipelineOptions, RegistrationState, run_pipeline
from .synth import SceneSpec, generate_scene

__version__ = "0.1.0"

__all__ = [
    "BAMode", "BundleProblem", "BundleResult", "bundle_adjust",
    "Camera", "Intrinsics", "Pose", "pixel_ray", "project",
    "compare_cameras", "LMOptions", "ResidualProblem", "lm_minimize",
    "TriangleMesh", "intersect_ray_mesh", "PipelineOptions", "RegistrationState", "run_pipeline",
    "SceneSpec", "generate_scene",
]
