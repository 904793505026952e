"""Loss assembly for the distillation loop, with hand-derived buffer adjoints.

Every term is a function of the rendered buffers, so the whole loss
backpropagates through the rasterizer via per-pixel buffer adjoints. The
perceptual term is a three-level pyramid of gradient-magnitude L1
differences, a deterministic stand-in for a learned metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .raster import BufferAdjoints, RenderBuffers

_GRAD_EPS = 1e-12
PYRAMID_LEVELS = 3


@dataclass
class LossReport:
    """Per-term raw scalars plus the weights that combined them."""

    total: float
    gen_l1: float
    perceptual: float
    normal: float
    disparity: float
    tv: float
    depth_distortion: float
    normal_consistency: float
    omega: float
    weights: dict = field(default_factory=dict)
    t: int = 0
    viewpoint: int = -1

    def expected_total(self) -> float:
        w = self.weights
        return (self.omega * (self.gen_l1 + w["lpips"] * self.perceptual)
                + w["norm"] * self.normal
                + w["disp"] * self.disparity
                + w["tv"] * self.tv
                + w["depth_distortion"] * self.depth_distortion
                + w["normal_consistency"] * self.normal_consistency)

    def validate(self):
        terms = [self.total, self.gen_l1, self.perceptual, self.normal,
                 self.disparity, self.tv, self.depth_distortion,
                 self.normal_consistency, self.omega]
        if not all(math.isfinite(v) for v in terms):
            raise ValueError("loss report contains non-finite terms")
        if abs(self.total - self.expected_total()) > 1e-6:
            raise ValueError("loss total does not reconstruct from its terms")


def omega_weight(t: int, config, alpha_bar_t=None) -> float:
    """Noise-level dependent weight of the image term."""
    mode = getattr(config, "omega_mode", "constant")
    if mode == "constant":
        return 1.0
    if mode == "snr_power":
        if alpha_bar_t is None:
            raise ValueError("snr_power weighting needs alpha_bar_t")
        return float((1.0 - alpha_bar_t) ** config.omega_power)
    raise ValueError(f"unknown omega mode {mode!r}")


def _mean_pool(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2]
                   + img[0::2, 1::2] + img[1::2, 1::2])


def _mean_pool_adjoint(a: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape)
    up = np.repeat(np.repeat(a, 2, axis=0), 2, axis=1) * 0.25
    out[: up.shape[0], : up.shape[1]] = up
    return out


def _grad_maps(img: np.ndarray):
    """Forward differences along rows and columns, zero at trailing edges."""
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:-1] = img[1:] - img[:-1]
    gy[:, :-1] = img[:, 1:] - img[:, :-1]
    return gx, gy


def _diff_adjoint_x(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    out[1:] += a[:-1]
    out[:-1] -= a[:-1]
    return out


def _diff_adjoint_y(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    out[:, 1:] += a[:, :-1]
    out[:, :-1] -= a[:, :-1]
    return out


def _perceptual(x: np.ndarray, y: np.ndarray):
    """Pyramid gradient-magnitude L1; returns (value, adjoint wrt x)."""
    levels_x = [x]
    levels_y = [y]
    for _ in range(PYRAMID_LEVELS - 1):
        levels_x.append(_mean_pool(levels_x[-1]))
        levels_y.append(_mean_pool(levels_y[-1]))

    value = 0.0
    level_adjoints = []
    for lx, ly in zip(levels_x, levels_y):
        gx_r, gy_r = _grad_maps(lx)
        gx_g, gy_g = _grad_maps(ly)
        m_r = np.sqrt(gx_r * gx_r + gy_r * gy_r + _GRAD_EPS)
        m_g = np.sqrt(gx_g * gx_g + gy_g * gy_g + _GRAD_EPS)
        diff = m_r - m_g
        count = diff.size * PYRAMID_LEVELS
        value += np.abs(diff).sum() / count
        a_m = np.sign(diff) / count
        level_adjoints.append(_diff_adjoint_x(a_m * gx_r / m_r)
                              + _diff_adjoint_y(a_m * gy_r / m_r))

    adj = level_adjoints[-1]
    for lvl in range(PYRAMID_LEVELS - 2, -1, -1):
        adj = _mean_pool_adjoint(adj, levels_x[lvl].shape) \
            + level_adjoints[lvl]
    return float(value), adj


def _l1_masked(a: np.ndarray, b: np.ndarray, mask=None):
    """Mean absolute difference and its adjoint wrt a.

    With a mask, the mean runs over masked pixels only (channels still
    averaged); an all-false mask gives a zero term and zero adjoint.
    """
    diff = a - b
    if mask is None:
        count = diff.size
        value = np.abs(diff).sum() / count
        return float(value), np.sign(diff) / count
    npix = int(np.count_nonzero(mask))
    if npix == 0:
        return 0.0, np.zeros_like(a)
    m = mask if diff.ndim == mask.ndim else mask[..., None]
    channels = diff.size // mask.size
    count = npix * channels
    masked = np.where(m, diff, 0.0)
    return float(np.abs(masked).sum() / count), np.sign(masked) / count


def _total_variation(img: np.ndarray):
    """Anisotropic TV normalized by element count; returns (value, adjoint)."""
    dx = img[1:] - img[:-1]
    dy = img[:, 1:] - img[:, :-1]
    n = img.size
    value = (np.abs(dx).sum() + np.abs(dy).sum()) / n
    adj = np.zeros_like(img)
    sx = np.sign(dx) / n
    sy = np.sign(dy) / n
    adj[1:] += sx
    adj[:-1] -= sx
    adj[:, 1:] += sy
    adj[:, :-1] -= sy
    return float(value), adj


def _normal_consistency(nrm: np.ndarray):
    """Mean (1 - n_i . n_j) over horizontal and vertical neighbor pairs."""
    h, w = nrm.shape[:2]
    pairs = (h - 1) * w + h * (w - 1)
    if pairs == 0:
        return 0.0, np.zeros_like(nrm)
    dot_x = (nrm[1:] * nrm[:-1]).sum(axis=-1)
    dot_y = (nrm[:, 1:] * nrm[:, :-1]).sum(axis=-1)
    value = ((1.0 - dot_x).sum() + (1.0 - dot_y).sum()) / pairs
    adj = np.zeros_like(nrm)
    adj[1:] -= nrm[:-1] / pairs
    adj[:-1] -= nrm[1:] / pairs
    adj[:, 1:] -= nrm[:, :-1] / pairs
    adj[:, :-1] -= nrm[:, 1:] / pairs
    return float(value), adj


def compute_losses(rendered: RenderBuffers, generated: np.ndarray,
                   mesh_buffers: RenderBuffers, t: int, config,
                   alpha_bar_t=None, viewpoint: int = -1):
    """Assemble the training loss; returns (LossReport, BufferAdjoints).

    generated is the denoised image the render is pulled toward. Geometry
    terms compare rendered normal/disparity buffers against the proxy-mesh
    buffers over pixels the mesh covers (mesh alpha exactly 1). The
    adjoints are the derivative of the weighted total w.r.t. each rendered
    buffer, ready for the rasterizer backward pass.
    """
    generated = np.asarray(generated, dtype=np.float64)
    h, w = rendered.color.shape[:2]
    if generated.shape != (h, w, 3):
        raise ValueError(f"generated image shape {generated.shape} does not "
                         f"match render resolution {(h, w)}")
    if mesh_buffers.color.shape[:2] != (h, w):
        raise ValueError("mesh buffers resolution mismatch")

    color = rendered.color.astype(np.float64)
    disp = rendered.disparity.astype(np.float64)
    nrm = rendered.normal.astype(np.float64)

    omega = omega_weight(t, config, alpha_bar_t)
    weights = {
        "lpips": config.lambda_lpips,
        "norm": config.lambda_norm,
        "disp": config.lambda_disp,
        "tv": config.lambda_tv,
        "depth_distortion": config.lambda_depth_distortion,
        "normal_consistency": config.lambda_normal_consistency,
    }

    gen_l1, a_l1 = _l1_masked(color, generated)
    perc, a_perc = _perceptual(color, generated)
    tv, a_tv = _total_variation(color)

    hit = mesh_buffers.alpha.astype(np.float64) == 1.0
    l_norm, a_norm = _l1_masked(nrm, mesh_buffers.normal.astype(np.float64),
                                hit)
    l_disp, a_disp = _l1_masked(disp,
                                mesh_buffers.disparity.astype(np.float64),
                                hit)
    dd, a_dd = _total_variation(disp)
    nc, a_nc = _normal_consistency(nrm)

    total = (omega * (gen_l1 + weights["lpips"] * perc)
             + weights["norm"] * l_norm
             + weights["disp"] * l_disp
             + weights["tv"] * tv
             + weights["depth_distortion"] * dd
             + weights["normal_consistency"] * nc)

    adjoints = BufferAdjoints(
        color=omega * (a_l1 + weights["lpips"] * a_perc)
        + weights["tv"] * a_tv,
        disparity=weights["disp"] * a_disp
        + weights["depth_distortion"] * a_dd,
        normal=weights["norm"] * a_norm
        + weights["normal_consistency"] * a_nc,
    )
    report = LossReport(
        total=float(total), gen_l1=gen_l1, perceptual=perc, normal=l_norm,
        disparity=l_disp, tv=tv, depth_distortion=dd, normal_consistency=nc,
        omega=omega, weights=weights, t=int(t), viewpoint=viewpoint)
    report.validate()
    return report, adjoints
