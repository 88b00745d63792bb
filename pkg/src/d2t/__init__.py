"""Sparse-view 3D Gaussian splatting from uncalibrated images.

Pipeline: pairwise pointmaps are aligned into a coarse scene, a Gaussian cloud
is fitted jointly with pose corrections, monocular depth is affinely aligned
to trusted coarse depth, novel views are synthesized by depth warping and
inpainting, and the cloud is refined with those views as extra supervision.
"""

from .geometry import CameraIntrinsics, Pose, compose, invert, se3_exp, se3_log, umeyama
from .splat_renderer import GaussianCloud, RenderConfig, init_from_points, render, render_with_gradients

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "Pose", "compose", "invert", "se3_exp", "se3_log", "umeyama",
    "GaussianCloud", "RenderConfig", "init_from_points", "render", "render_with_gradients",
]
