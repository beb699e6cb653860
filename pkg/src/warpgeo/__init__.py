"""Differentiable multi-view geometry: inverse warping, edge-aware depth-normal
consistency layers, photometric losses with analytic gradients, and direct
per-pixel recovery of depth, normals, masks and poses on synthetic scenes."""

from .camera import CameraIntrinsics, PoseSE3, backproject, project, se3_exp, se3_log, warp_coords
from .consistency import depth_to_normal, edge_weights, normal_to_depth
from .gradcheck import finite_diff_check
from .losses import Ablation, LossReport, LossWeights, Observation, total_objective
from .metrics import depth_metrics, normal_metrics
from .optimize import OptimConfig, optimize
from .sampling import bilinear_sample
from .scene import SceneSpec, Sequence, make_sequence, preset

__version__ = "0.1.0"

__all__ = [
    "Ablation", "CameraIntrinsics", "LossReport", "LossWeights", "Observation", "OptimConfig",
    "PoseSE3", "SceneSpec", "Sequence", "backproject", "bilinear_sample", "depth_metrics",
    "depth_to_normal", "edge_weights", "finite_diff_check", "make_sequence", "normal_metrics",
    "normal_to_depth", "optimize", "preset", "project", "se3_exp", "se3_log", "total_objective",
    "warp_coords",
]
