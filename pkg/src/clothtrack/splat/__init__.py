"""Mesh-attached Gaussian splatting: appearance, projection, rasterization, fitting."""

from .camera import CameraView, hemisphere_cameras, look_at, project_gaussian, project_gaussians
from .gaussians import GaussianCloud, attach_gaussians, world_gaussians
from .raster import RenderGradients, RenderOutput, render_backward, render_view

__all__ = [
    "CameraView", "GaussianCloud", "RenderGradients", "RenderOutput", "attach_gaussians",
    "hemisphere_cameras", "look_at", "project_gaussian", "project_gaussians", "render_backward",
    "render_view", "world_gaussians",
]
