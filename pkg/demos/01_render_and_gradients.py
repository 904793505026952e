"""
Rendering a splat scene and checking its gradients
==================================================

Builds the textured toy plane, renders all four buffers, cross-checks the
tiled renderer against the exhaustive per-pixel oracle, then probes one
analytic derivative with central finite differences.
"""

import os

import numpy as np
from PIL import Image

from splatgen.losses import BufferAdjoints
from splatgen.raster import RenderSettings, backward, render, render_reference
from splatgen.toy import make_toy_scene, toy_cameras

OUT = os.path.join(os.path.dirname(__file__), "out", "render")
os.makedirs(OUT, exist_ok=True)

# ---------------------------------------------------------------------
# Render the toy plane: color, disparity, normal, and alpha buffers.

scene = make_toy_scene("target")
camera, _ = toy_cameras(width=192, height=192)
buffers = render(scene, camera)

print(f"scene: {len(scene.cloud)} splats, camera {camera.width}x{camera.height}")
print(f"color range  [{buffers.color.min():.3f}, {buffers.color.max():.3f}]")
print(f"alpha mean   {buffers.alpha.mean():.3f}")
print(f"disparity    [{buffers.disparity.min():.3f}, {buffers.disparity.max():.3f}] 1/m")

Image.fromarray((np.clip(buffers.color, 0, 1) * 255).astype(np.uint8)) \
    .save(os.path.join(OUT, "color.png"))
# normals are signed unit vectors; remap to [0, 1] for viewing
Image.fromarray(((buffers.normal * 0.5 + 0.5) * 255).astype(np.uint8)) \
    .save(os.path.join(OUT, "normal.png"))
d = buffers.disparity / max(buffers.disparity.max(), 1e-9)
Image.fromarray((d * 255).astype(np.uint8)).save(
    os.path.join(OUT, "disparity.png"))
print(f"wrote color.png / normal.png / disparity.png to {OUT}")

# ---------------------------------------------------------------------
# The tiled path must agree with the unbinned reference to float precision.

ref = render_reference(scene, camera)
worst = max(np.abs(buffers.color - ref.color).max(),
            np.abs(buffers.disparity - ref.disparity).max(),
            np.abs(buffers.normal - ref.normal).max(),
            np.abs(buffers.alpha - ref.alpha).max())
print(f"tiled vs reference, worst abs difference: {worst:.2e}")

# ---------------------------------------------------------------------
# Probe one derivative: d(sum of red channel) / d(center_x of splat 0),
# analytic against central differences in float64.

settings = RenderSettings(dtype=np.float64)
small = make_toy_scene("target", k=4)
small.cloud = small.cloud.astype(np.float64)
cam_small, _ = toy_cameras(width=48, height=48)

adj = BufferAdjoints(color=np.zeros((48, 48, 3)))
adj.color[:, :, 0] = 1.0
grads = backward(small, cam_small, adj, settings)
analytic = grads.centers[0, 0]

h = 1e-5
vals = {}
for sign in (+1.0, -1.0):
    probe = small.copy()
    probe.cloud.centers[0, 0] += sign * h
    vals[sign] = render(probe, cam_small, settings).color[:, :, 0].sum()
fd = (vals[+1.0] - vals[-1.0]) / (2 * h)
print(f"d(red)/d(center_x): analytic {analytic:+.8f}, "
      f"finite difference {fd:+.8f}, "
      f"rel err {abs(analytic - fd) / max(abs(fd), 1e-12):.2e}")
