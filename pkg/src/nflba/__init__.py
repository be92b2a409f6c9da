"""Gaussian-splatting SLAM with a near-field lighting bundle-adjustment term.

Modules: geometry (poses, Gaussians), splatter (differentiable rasterizer),
shading (near-light shading field), losses (photometric and NFL objectives),
slam (tracking/mapping driver), simulator (synthetic lumen sequences),
evalkit (metrics and PLY export), config and cli.
"""

from .geometry import GaussianScene, Intrinsics, Pose
from .losses import LossWeights, ShadingParams, preset_weights
from .slam import Frame, SlamConfig, TrackingFailure, run_slam
from .splatter import RenderOptions, render, render_backward

__version__ = "0.1.0"

__all__ = [
    "GaussianScene", "Intrinsics", "Pose", "LossWeights", "ShadingParams", "preset_weights",
    "Frame", "SlamConfig", "TrackingFailure", "run_slam", "RenderOptions", "render",
    "render_backward", "__version__",
]
