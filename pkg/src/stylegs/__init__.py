"""Stylized 3D Gaussian splatting at desk scale: splatting renderer, score-distillation
guidance with toy and analytic denoisers, surface-area regularization, and a two-stage driver."""

from .camera import PinholeCamera, fixed_ring_cameras, flatten_extrinsics, random_orbit_camera
from .config import RunConfig, load_config
from .errors import DivergenceError, FormatError, ParameterError
from .gaussians import CloudGrads, GaussianCloud, covariance_from_params, init_cloud
from .metrics import StyleFeatureBank, gram_style_distance, masked_rmse, object_mask, psnr
from .pipeline import stage1_generate, stage2_stylize
from .ply import load_ply, save_ply
from .rasterizer import RenderOutput, radius_stats, render, render_backward
from .regularizer import ellipsoid_surface_area, surface_loss, surface_loss_grad

__version__ = "0.1.0"

__all__ = [
    "CloudGrads",
    "DivergenceError",
    "FormatError",
    "GaussianCloud",
    "ParameterError",
    "PinholeCamera",
    "RenderOutput",
    "RunConfig",
    "StyleFeatureBank",
    "covariance_from_params",
    "ellipsoid_surface_area",
    "fixed_ring_cameras",
    "flatten_extrinsics",
    "gram_style_distance",
    "init_cloud",
    "load_config",
    "load_ply",
    "masked_rmse",
    "object_mask",
    "psnr",
    "radius_stats",
    "random_orbit_camera",
    "render",
    "render_backward",
    "save_ply",
    "stage1_generate",
    "stage2_stylize",
    "surface_loss",
    "surface_loss_grad",
]
