"""Splat-scene generation engine.

Layered as: scene/camera primitives, a differentiable splat rasterizer,
diffusion schedule math with analytic priors and a remote-denoiser client,
coarse layout generation, the distillation optimizer, and persistence plus a
CLI driver. Heavy modules (rasterizer kernels) are imported on first use.
"""

__version__ = "0.1.0"

from .camera import Camera, TrajectorySpec
from .scene import (
    CapacityError,
    EnvironmentMap,
    RigidTransform,
    SceneModel,
    Splat,
    SplatCloud,
    TriangleMesh,
    compose_and_relight,
    env_query,
    mesh_to_splats,
)

__all__ = [
    "Camera",
    "TrajectorySpec",
    "CapacityError",
    "EnvironmentMap",
    "RigidTransform",
    "SceneModel",
    "Splat",
    "SplatCloud",
    "TriangleMesh",
    "compose_and_relight",
    "env_query",
    "mesh_to_splats",
    "__version__",
]
