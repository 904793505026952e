"""Desk-scale plane scenes for convergence runs, demos, and benchmarks.

The target scene is a textured splat grid lying exactly on a plane proxy;
the init scene perturbs positions, tilts tangent frames, and resets colors
to gray. Fitting the init scene toward a rendered target exercises the full
loop: image loss pulls colors, geometry losses pull frames back onto the
proxy plane.
"""

from __future__ import annotations

import numpy as np

from .camera import Camera
from .scene import (EnvironmentMap, SceneModel, SplatCloud, TriangleMesh,
                    orthonormalize_tangents)

PLANE_HALF = 2.0
ENV_COLOR = (0.05, 0.05, 0.08)


def plane_proxy(half: float = PLANE_HALF) -> TriangleMesh:
    """Two-triangle quad in the z=0 plane, normal facing +z."""
    v = np.array([[-half, -half, 0.0], [half, -half, 0.0],
                  [half, half, 0.0], [-half, half, 0.0]])
    f = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    return TriangleMesh(v, f)


def plane_texture(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Smooth procedural RGB over the plane, values inside (0, 1)."""
    r = 0.5 + 0.35 * np.sin(1.7 * x + 0.9 * y)
    g = 0.5 + 0.35 * np.sin(2.3 * y - 0.4 * x + 1.0)
    b = 0.5 + 0.35 * np.sin(1.1 * x - 1.4 * y + 2.0)
    return np.stack([r, g, b], axis=-1)


def _tilted_frames(n: int, tilt: float, rng) -> tuple:
    """Plane-aligned tangent frames rotated by random angles ~ tilt radians."""
    u = np.tile(np.array([1.0, 0.0, 0.0]), (n, 1))
    v = np.tile(np.array([0.0, 1.0, 0.0]), (n, 1))
    if tilt > 0.0:
        axes = rng.normal(size=(n, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        angles = rng.normal(0.0, tilt, n)
        # Rodrigues rotation of both tangents about the random axis
        for vec in (u, v):
            cosa = np.cos(angles)[:, None]
            sina = np.sin(angles)[:, None]
            dot = (axes * vec).sum(axis=1, keepdims=True)
            vec[:] = vec * cosa + np.cross(axes, vec) * sina \
                + axes * dot * (1.0 - cosa)
    return orthonormalize_tangents(u, v)[:2]


def make_plane_cloud(k: int = 24, *, colors: str = "texture",
                     pos_jitter: float = 0.0, tilt: float = 0.0,
                     opacity: float = 0.9, scale_factor: float = 0.75,
                     half: float = PLANE_HALF, seed: int = 0) -> SplatCloud:
    """k x k splat grid covering the plane quad."""
    rng = np.random.default_rng(seed)
    spacing = 2.0 * half / k
    line = -half + (np.arange(k) + 0.5) * spacing
    gx, gy = np.meshgrid(line, line, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel(),
                        np.zeros(k * k)], axis=-1)
    if pos_jitter > 0.0:
        centers = centers + rng.normal(0.0, pos_jitter, centers.shape)
    u, v = _tilted_frames(k * k, tilt, rng)
    scales = np.full((k * k, 2), scale_factor * spacing)
    opac = np.full(k * k, opacity)
    if colors == "texture":
        rgb = plane_texture(centers[:, 0], centers[:, 1])
    elif colors == "gray":
        rgb = np.full((k * k, 3), 0.5)
    else:
        raise ValueError(f"unknown color mode {colors!r}")
    return SplatCloud(centers, u, v, scales, opac, rgb[:, None, :],
                      dtype=np.float32)


def make_toy_scene(kind: str = "target", k: int = 24, seed: int = 0,
                   splat_cap: int = 5000) -> SceneModel:
    """kind 'target': textured, exactly on the plane. 'init': perturbed."""
    if kind == "target":
        cloud = make_plane_cloud(k, colors="texture", seed=seed)
    elif kind == "init":
        cloud = make_plane_cloud(k, colors="gray", pos_jitter=0.06,
                                 tilt=0.30, opacity=0.7, seed=seed + 1)
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    return SceneModel(cloud, EnvironmentMap.uniform(ENV_COLOR),
                      proxy=plane_proxy(), splat_cap=splat_cap)


def toy_cameras(width: int = 64, height: int = 64):
    """(train, held_out) cameras above the plane, both facing its front."""
    train = Camera.look_at((0.0, -2.6, 3.4), (0.0, 0.0, 0.0),
                           fov_y=0.95, width=width, height=height)
    held = Camera.look_at((1.2, -2.1, 3.1), (0.0, 0.1, 0.0),
                          fov_y=0.95, width=width, height=height)
    return train, held


def make_bench_scene(n: int = 100_000, seed: int = 0,
                     width: int = 512, height: int = 512):
    """Throughput scene: n small splats filling a deep frustum volume.

    Returns (scene, camera). Splat footprints stay a few pixels wide so
    per-tile candidate lists match a realistic street-scene workload.
    """
    rng = np.random.default_rng(seed)
    depth = rng.uniform(2.0, 20.0, n)
    half = 0.55 * depth  # stay inside a ~60 degree frustum
    centers = np.stack([rng.uniform(-1.0, 1.0, n) * half,
                        rng.uniform(-1.0, 1.0, n) * half,
                        depth], axis=-1)
    u, v, _ = orthonormalize_tangents(rng.normal(size=(n, 3)),
                                      rng.normal(size=(n, 3)))
    scales = rng.uniform(0.02, 0.1, (n, 2)) * (depth / 8.0)[:, None]
    opac = rng.uniform(0.3, 0.9, n)
    rgb = rng.uniform(0.1, 0.9, (n, 3))
    cloud = SplatCloud(centers, u, v, scales, opac, rgb[:, None, :],
                       dtype=np.float32)
    scene = SceneModel(cloud, EnvironmentMap.uniform(ENV_COLOR))
    camera = Camera.look_at((0.0, 0.0, 0.0), (0.0, 0.1, 10.0),
                            fov_y=np.deg2rad(60.0), width=width,
                            height=height)
    return scene, camera
