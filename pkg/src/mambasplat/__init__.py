"""mambasplat: single-image 3D Gaussian splat prediction.

A selective state-space sequence backbone turns one image plus camera
parameters into a fixed-size set of 3D Gaussians; a differentiable
splatting renderer turns those into images for multi-view supervised
training. Everything runs on a small numpy reverse-mode autodiff engine
with numba kernels for the scan and the rasterizer.
"""

from .autodiff import Tensor, gradcheck, precision, tensor
from .camera import Camera, anchor_cameras, load_cameras, normalized_camera, save_cameras
from .config import Config, load_config, save_config
from .decoder import DecoderParams, bin_expectation, decode
from .gaussians import GaussianSet, load_gaussians, save_gaussians
from .losses import (LossWeights, contour_lookup, dist_loss, mask_to_radial_polygon,
                     random_background, register_perceptual, total_loss)
from .metrics import psnr, ssim
from .optim import AdamW, clip_grad_norm
from .renderer import (Projected2DGaussian, RenderedImage, build_covariance,
                       eval_gaussian, project_gaussian, rasterize, render)
from .ssm import MambaBlockParams, SsmCore, discretize, mamba_block, selective_scan
from .training import Model, infer, init_model, load_checkpoint, restore_model, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AdamW", "Camera", "Config", "DecoderParams", "GaussianSet", "LossWeights",
    "MambaBlockParams", "Model", "Projected2DGaussian", "RenderedImage", "SsmCore",
    "Tensor", "anchor_cameras", "bin_expectation", "build_covariance", "clip_grad_norm",
    "contour_lookup", "decode", "discretize", "dist_loss", "eval_gaussian", "gradcheck",
    "infer", "init_model", "load_cameras", "load_checkpoint", "load_config",
    "load_gaussians", "mamba_block", "mask_to_radial_polygon", "normalized_camera",
    "precision", "project_gaussian", "psnr", "random_background", "rasterize",
    "register_perceptual", "render", "restore_model", "save_cameras", "save_checkpoint",
    "save_config", "save_gaussians", "selective_scan", "ssim", "tensor", "total_loss",
    "train",
]
