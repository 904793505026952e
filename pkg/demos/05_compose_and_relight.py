"""
Dropping an asset into a scene, with relighting
===============================================

Splat scenes compose by concatenation: rigidly transform an asset cloud,
rescale its colors to the receiving scene's light level, append. The result
renders along a short trajectory, written as numbered frames.
"""

import os

import numpy as np
from PIL import Image

from splatgen.camera import Camera, TrajectorySpec
from splatgen.scene import (EnvironmentMap, RigidTransform, SceneModel,
                            compose_and_relight)
from splatgen.raster import render
from splatgen.sceneio import save_trajectory
from splatgen.toy import make_plane_cloud, make_toy_scene

OUT = os.path.join(os.path.dirname(__file__), "out", "compose")
os.makedirs(OUT, exist_ok=True)

# ---------------------------------------------------------------------
# Base scene: the textured plane under a dim bluish sky. Asset: a small
# bright plane patch, authored under a much brighter environment.

scene = make_toy_scene("target")
asset = make_plane_cloud(k=6, colors="texture", half=0.5, seed=5)
print(f"base {len(scene.cloud)} splats, asset {len(asset)} splats")

# ---------------------------------------------------------------------
# Rotate the asset 30 degrees about z, lift it above the plane, shrink it.

ang = np.deg2rad(30.0)
transform = RigidTransform(
    rotation=np.array([[np.cos(ang), -np.sin(ang), 0.0],
                       [np.sin(ang), np.cos(ang), 0.0],
                       [0.0, 0.0, 1.0]]),
    translation=np.array([0.6, -0.4, 0.8]),
    scale=0.8)

# reference_irradiance says how bright the asset's authoring light was;
# relighting scales its colors by scene irradiance / reference
composed = compose_and_relight(scene, asset, transform, relight=True,
                               reference_irradiance=2.0)
print(f"composed scene has {len(composed.cloud)} splats")
mean_before = float(asset.sh_coeffs[:, 0, :].mean())
mean_after = float(composed.cloud.sh_coeffs[-len(asset):, 0, :].mean())
print(f"asset mean color {mean_before:.3f} -> {mean_after:.3f} after "
      f"relighting under the dim sky")

# ---------------------------------------------------------------------
# A 12-pose orbit, saved as a trajectory file and rendered frame by frame.

poses = []
for i in range(12):
    a = 2.0 * np.pi * i / 12
    poses.append(Camera.look_at((3.2 * np.cos(a), 3.2 * np.sin(a), 2.6),
                                (0.0, 0.0, 0.2), fov_y=0.9,
                                width=160, height=120))
traj = TrajectorySpec(poses, fps=8.0)
save_trajectory(os.path.join(OUT, "orbit.json"), traj)

for i, cam in enumerate(traj.cameras):
    color = render(composed, cam).color
    arr = (np.clip(color, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(os.path.join(OUT, f"frame_{i:05d}.png"))
print(f"wrote orbit.json and {len(poses)} frames to {OUT}")
