"""Pinhole camera model and ray generation.

Conventions: world z is up; camera space is x-right, y-down, z-forward
(OpenCV style). Depth of a point is its camera-space z, and all rays are
parameterized so that the point at parameter tau has camera depth tau.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-6


@dataclass
class Camera:
    """Viewpoint: pose, vertical field of view, resolution and depth range."""

    position: np.ndarray          # (3,) world
    rotation: np.ndarray          # (3,3) world-to-camera
    fov_y: float                  # radians
    width: int
    height: int
    near: float = 0.05
    far: float = 1000.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not (0.0 < self.fov_y < np.pi):
            raise ValueError(f"fov_y must be in (0, pi), got {self.fov_y}")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")
        if not (0.0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near} far={self.far}")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.2e})")

    @property
    def focal(self) -> float:
        """Focal length in pixels (square pixels, fov_y is vertical)."""
        return self.height / (2.0 * np.tan(self.fov_y / 2.0))

    @property
    def principal(self) -> tuple[float, float]:
        return self.width / 2.0, self.height / 2.0

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0), fov_y=np.deg2rad(60.0),
                width=256, height=256, near=0.05, far=1000.0) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        nf = np.linalg.norm(forward)
        if nf == 0.0:
            raise ValueError("camera position and target coincide")
        forward = forward / nf
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        nr = np.linalg.norm(right)
        if nr < 1e-9:
            # view direction parallel to up; pick an arbitrary right axis
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
            nr = np.linalg.norm(right)
        right = right / nr
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward], axis=0)
        return cls(position, rot, fov_y, width, height, near, far)

    def pixel_ray_dirs(self, dtype=np.float64) -> np.ndarray:
        """World-space ray directions for every pixel center, shape (H, W, 3).

        Directions are scaled so that camera depth equals the ray parameter:
        world_point(tau) = position + tau * dir.
        """
        f = self.focal
        cx, cy = self.principal
        xs = (np.arange(self.width, dtype=np.float64) + 0.5 - cx) / f
        ys = (np.arange(self.height, dtype=np.float64) + 0.5 - cy) / f
        gx, gy = np.meshgrid(xs, ys)
        dirs_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
        dirs_world = dirs_cam @ self.rotation  # == dirs_cam @ R == (R.T @ d).T rowwise
        return dirs_world.astype(dtype)


@dataclass
class TrajectorySpec:
    """Ordered camera poses for frame rendering, with a playback rate."""

    cameras: list = field(default_factory=list)
    fps: float = 10.0

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ValueError("trajectory needs at least one pose")
        res = {(c.width, c.height) for c in self.cameras}
        if len(res) != 1:
            raise ValueError(f"trajectory resolutions must be uniform, got {sorted(res)}")
