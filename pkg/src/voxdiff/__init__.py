"""Voxel-grid radiance fields with a 3D diffusion prior.

Posed images are fitted into regularized ReLU-field grids, a 3D U-Net denoiser learns
the distribution of those grids, and guided ancestral sampling turns a single posed
image into a full grid.
"""

__version__ = "0.1.0"

from .camera import CameraPose, Intrinsics
from .render import QuadratureConfig
from .voxgrid import ActivationParams, VoxelGrid, grid_read, grid_write

__all__ = ["ActivationParams", "CameraPose", "Intrinsics", "QuadratureConfig", "VoxelGrid", "grid_read", "grid_write"]
