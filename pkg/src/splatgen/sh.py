"""Real spherical harmonics for view-dependent splat color.

The degree-0 basis is 1.0, so sh_coeffs[:, 0, :] holds plain RGB. Higher
bands use the usual real SH constants. Splat color is evaluated per splat
along the camera-to-center direction and clamped to [0, 1]; the clamp mask
is exposed so gradients can be zeroed where the clamp is active.
"""

from __future__ import annotations

import numpy as np

C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)

MAX_DEGREE = 3


def num_bases(degree: int) -> int:
    return (degree + 1) ** 2


def degree_for_bases(nb: int) -> int:
    deg = int(round(np.sqrt(nb))) - 1
    if num_bases(deg) != nb or not (0 <= deg <= MAX_DEGREE):
        raise ValueError(f"{nb} is not a valid SH basis count for degree <= {MAX_DEGREE}")
    return deg


def eval_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values for unit directions (..., 3) -> (..., (degree+1)^2)."""
    if not (0 <= degree <= MAX_DEGREE):
        raise ValueError(f"degree must be in [0, {MAX_DEGREE}]")
    dirs = np.asarray(dirs, dtype=np.float64)
    shape = dirs.shape[:-1]
    out = np.empty(shape + (num_bases(degree),), dtype=np.float64)
    out[..., 0] = 1.0
    if degree >= 1:
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        out[..., 1] = -C1 * y
        out[..., 2] = C1 * z
        out[..., 3] = -C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = C2[0] * x * y
        out[..., 5] = C2[1] * y * z
        out[..., 6] = C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = C2[3] * x * z
        out[..., 8] = C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = C3[1] * x * y * z
        out[..., 11] = C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = C3[5] * z * (xx - yy)
        out[..., 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def eval_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction) for unit directions: (..., 3) -> (..., nb, 3)."""
    if not (0 <= degree <= MAX_DEGREE):
        raise ValueError(f"degree must be in [0, {MAX_DEGREE}]")
    dirs = np.asarray(dirs, dtype=np.float64)
    shape = dirs.shape[:-1]
    nb = num_bases(degree)
    g = np.zeros(shape + (nb, 3), dtype=np.float64)
    if degree >= 1:
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        g[..., 1, 1] = -C1
        g[..., 2, 2] = C1
        g[..., 3, 0] = -C1
    if degree >= 2:
        g[..., 4, 0] = C2[0] * y
        g[..., 4, 1] = C2[0] * x
        g[..., 5, 1] = C2[1] * z
        g[..., 5, 2] = C2[1] * y
        g[..., 6, 0] = C2[2] * (-2.0 * x)
        g[..., 6, 1] = C2[2] * (-2.0 * y)
        g[..., 6, 2] = C2[2] * (4.0 * z)
        g[..., 7, 0] = C2[3] * z
        g[..., 7, 2] = C2[3] * x
        g[..., 8, 0] = C2[4] * (2.0 * x)
        g[..., 8, 1] = C2[4] * (-2.0 * y)
    if degree >= 3:
        g[..., 9, 0] = C3[0] * 6.0 * x * y
        g[..., 9, 1] = C3[0] * (3.0 * x * x - 3.0 * y * y)
        g[..., 10, 0] = C3[1] * y * z
        g[..., 10, 1] = C3[1] * x * z
        g[..., 10, 2] = C3[1] * x * y
        g[..., 11, 0] = C3[2] * (-2.0 * x * y)
        g[..., 11, 1] = C3[2] * (4.0 * z * z - x * x - 3.0 * y * y)
        g[..., 11, 2] = C3[2] * (8.0 * y * z)
        g[..., 12, 0] = C3[3] * (-6.0 * x * z)
        g[..., 12, 1] = C3[3] * (-6.0 * y * z)
        g[..., 12, 2] = C3[3] * (6.0 * z * z - 3.0 * x * x - 3.0 * y * y)
        g[..., 13, 0] = C3[4] * (4.0 * z * z - 3.0 * x * x - y * y)
        g[..., 13, 1] = C3[4] * (-2.0 * x * y)
        g[..., 13, 2] = C3[4] * (8.0 * x * z)
        g[..., 14, 0] = C3[5] * (2.0 * x * z)
        g[..., 14, 1] = C3[5] * (-2.0 * y * z)
        g[..., 14, 2] = C3[5] * (x * x - y * y)
        g[..., 15, 0] = C3[6] * (3.0 * x * x - 3.0 * y * y)
        g[..., 15, 1] = C3[6] * (-6.0 * x * y)
    return g


def eval_colors(sh_coeffs: np.ndarray, dirs: np.ndarray):
    """Evaluate clamped RGB per splat.

    sh_coeffs: (N, nb, 3), dirs: (N, 3) unit. Returns (colors (N,3) in [0,1],
    inside mask (N,3) true where the clamp is inactive, basis (N, nb)).
    """
    nb = sh_coeffs.shape[1]
    degree = degree_for_bases(nb)
    basis = eval_basis(dirs, degree)
    raw = np.einsum("nb,nbc->nc", basis, sh_coeffs)
    colors = np.clip(raw, 0.0, 1.0)
    inside = (raw > 0.0) & (raw < 1.0)
    return colors, inside, basis
