"""Diffusion schedule math, analytic priors, DDIM stepping, latent codec.

Everything here is a pure function of its arguments. The noise table is the
cumulative signal-retention coefficient: alpha_bar[t] is the squared signal
fraction at level t, alpha_bar[0] = 1, strictly decreasing. Noising follows
z_t = sqrt(ab)*z_0 + sqrt(1-ab)*eps.

Denoisers are objects with a `predict(latent, t, alpha_bar, disparity, text)`
method returning a same-shape noise estimate; the analytic priors implement
it in closed form, the remote client forwards it over the wire protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DiffusionSchedule:
    alpha_bar: np.ndarray  # length T+1, alpha_bar[0] = 1

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.alpha_bar.ndim != 1 or len(self.alpha_bar) < 2:
            raise ValueError("alpha_bar must be a 1-d table of length T+1 >= 2")
        if self.alpha_bar[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if np.any(self.alpha_bar <= 0.0) or np.any(self.alpha_bar > 1.0):
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def num_steps(self) -> int:
        return len(self.alpha_bar) - 1

    def at(self, t: int) -> float:
        if not 0 <= t <= self.num_steps:
            raise ValueError(f"noise level {t} outside [0, {self.num_steps}]")
        return float(self.alpha_bar[t])


def make_schedule(num_steps: int, kind: str = "linear", *,
                  beta_min: float = 1e-4, beta_max: float = 0.02) -> DiffusionSchedule:
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if kind == "linear":
        if not (0.0 < beta_min <= beta_max < 1.0):
            raise ValueError("need 0 < beta_min <= beta_max < 1")
        betas = np.linspace(beta_min, beta_max, num_steps)
    elif kind == "cosine":
        s = 0.008
        grid = np.arange(num_steps + 1, dtype=np.float64) / num_steps
        f = np.cos((grid + s) / (1.0 + s) * (np.pi / 2.0)) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule(alpha_bar)


@dataclass
class LatentImage:
    data: np.ndarray   # h x w x c
    t: int = 0         # schedule index, 0 = clean

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"latent must be h x w x c, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("latent contains non-finite values")
        if self.t < 0:
            raise ValueError("noise level must be non-negative")


def add_noise(z0: LatentImage, eps: np.ndarray, t: int,
              schedule: DiffusionSchedule) -> LatentImage:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.data.shape:
        raise ValueError(f"noise shape {eps.shape} != latent {z0.data.shape}")
    ab = schedule.at(t)
    return LatentImage(np.sqrt(ab) * z0.data + np.sqrt(1.0 - ab) * eps, t)


# ---------------------------------------------------------------------------
# analytic priors


@dataclass
class GaussianPrior:
    """Diagonal Gaussian over clean latents; parameters broadcast to shape."""

    mean: np.ndarray
    variance: np.ndarray | float = 1.0

    def posterior_mean(self, z: np.ndarray, ab: float) -> np.ndarray:
        mu = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.variance, dtype=np.float64)
        gain = np.sqrt(ab) * var / (ab * var + 1.0 - ab)
        return mu + gain * (z - np.sqrt(ab) * mu)


@dataclass
class DeltaPrior:
    """Point mass: the zero-variance limit, posterior mean is the center."""

    mean: np.ndarray

    def posterior_mean(self, z: np.ndarray, ab: float) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.mean, dtype=np.float64),
                               z.shape).copy()


def analytic_eps(zt: LatentImage, t: int, prior,
                 schedule: DiffusionSchedule) -> np.ndarray:
    """Noise implied by the prior's posterior mean at level t.

    At ab = 1 the residual is zero by definition; the division guard returns
    exact zeros rather than 0/0.
    """
    ab = schedule.at(t)
    one_minus = 1.0 - ab
    if one_minus <= 1e-15:
        return np.zeros_like(zt.data)
    z0_hat = prior.posterior_mean(zt.data, ab)
    return (zt.data - np.sqrt(ab) * z0_hat) / np.sqrt(one_minus)


class AnalyticDenoiser:
    """Closed-form denoiser over an analytic prior.

    Conditioning inputs are accepted and ignored, so the full request path
    can be exercised with exactly verifiable outputs.
    """

    def __init__(self, prior, schedule: DiffusionSchedule):
        self.prior = prior
        self.schedule = schedule

    def predict(self, latent: np.ndarray, t: int, alpha_bar: float,
                disparity=None, text=None) -> np.ndarray:
        if abs(alpha_bar - self.schedule.at(t)) > 1e-9:
            raise ValueError(
                f"alpha_bar {alpha_bar} does not match schedule at t={t}")
        return analytic_eps(LatentImage(latent, t), t, self.prior, self.schedule)


# ---------------------------------------------------------------------------
# DDIM stepping


@dataclass
class Conditioning:
    disparity: np.ndarray | None = None
    text: str | None = None


def _sub_levels(start: int, stop: int, num_steps: int) -> np.ndarray:
    return np.round(np.linspace(start, stop, num_steps + 1)).astype(np.int64)


def _call_denoiser(denoiser, z, level, schedule, cond, step_index):
    c = cond or Conditioning()
    try:
        eps = denoiser.predict(z, int(level), schedule.at(int(level)),
                               c.disparity, c.text)
    except Exception as exc:
        raise RuntimeError(
            f"denoiser failed at sub-step {step_index} (level {int(level)}): {exc}"
        ) from exc
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z.shape:
        raise RuntimeError(
            f"denoiser returned shape {eps.shape} at sub-step {step_index}, "
            f"expected {z.shape}")
    return eps


def ddim_denoise_n(zt: LatentImage, num_steps: int, denoiser,
                   schedule: DiffusionSchedule,
                   conditioning: Conditioning | None = None) -> LatentImage:
    """Deterministic (eta = 0) DDIM from level zt.t down to 0 in num_steps."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if zt.t <= 0:
        raise ValueError("input latent must carry a positive noise level")
    schedule.at(zt.t)
    levels = _sub_levels(zt.t, 0, num_steps)
    z = zt.data.copy()
    for i in range(num_steps):
        lo, hi = levels[i + 1], levels[i]
        eps = _call_denoiser(denoiser, z, hi, schedule, conditioning, i)
        ab_hi = schedule.at(int(hi))
        ab_lo = schedule.at(int(lo))
        z0_hat = (z - np.sqrt(1.0 - ab_hi) * eps) / np.sqrt(ab_hi)
        z = np.sqrt(ab_lo) * z0_hat + np.sqrt(1.0 - ab_lo) * eps
    return LatentImage(z, 0)


def ddim_invert_n(z0: LatentImage, target_t: int, num_steps: int, denoiser,
                  schedule: DiffusionSchedule,
                  conditioning: Conditioning | None = None) -> LatentImage:
    """Deterministic DDIM inversion from level z0.t up to target_t.

    Each step applies z' = sqrt(ab'/ab)*(z - sqrt(1-ab)*eps) + sqrt(1-ab')*eps
    with eps predicted at the current (lower) level. The printed source of
    this recurrence has a non-real leading coefficient for levels below 1;
    the standard ratio-of-cumulative-coefficients form is used instead.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if target_t <= z0.t:
        raise ValueError("target noise level must exceed the input level")
    schedule.at(target_t)
    levels = _sub_levels(z0.t, target_t, num_steps)
    z = z0.data.copy()
    for i in range(num_steps):
        lo, hi = levels[i], levels[i + 1]
        eps = _call_denoiser(denoiser, z, lo, schedule, conditioning, i)
        ab_lo = schedule.at(int(lo))
        ab_hi = schedule.at(int(hi))
        z = np.sqrt(ab_hi / ab_lo) * (z - np.sqrt(1.0 - ab_lo) * eps) \
            + np.sqrt(1.0 - ab_hi) * eps
    return LatentImage(z, target_t)


# ---------------------------------------------------------------------------
# latent codec


class Codec:
    """Image-to-latent transform: identity, or f x f average pooling with
    bilinear upsampling back (latents keep 3 channels)."""

    def __init__(self, mode: str = "identity", factor: int = 1):
        if mode not in ("identity", "pooled"):
            raise ValueError(f"unknown codec mode {mode!r}")
        if mode == "pooled" and factor < 2:
            raise ValueError("pooled mode needs factor >= 2")
        self.mode = mode
        self.factor = 1 if mode == "identity" else int(factor)

    def _check(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 image, got {image.shape}")
        if self.mode == "pooled":
            h, w, _ = image.shape
            if h % self.factor or w % self.factor:
                raise ValueError(
                    f"image {h}x{w} not divisible by pooling factor {self.factor}")
        return image

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = self._check(image)
        if self.mode == "identity":
            return image.copy()
        f = self.factor
        h, w, c = image.shape
        return image.reshape(h // f, f, w // f, f, c).mean(axis=(1, 3))

    def encode_map(self, plane: np.ndarray) -> np.ndarray:
        """Pool a single-channel conditioning map the same way as encode."""
        plane = np.asarray(plane, dtype=np.float64)
        if plane.ndim != 2:
            raise ValueError(f"expected H x W map, got {plane.shape}")
        if self.mode == "identity":
            return plane.copy()
        f = self.factor
        h, w = plane.shape
        if h % f or w % f:
            raise ValueError(f"map {h}x{w} not divisible by factor {f}")
        return plane.reshape(h // f, f, w // f, f).mean(axis=(1, 3))

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim != 3:
            raise ValueError(f"expected h x w x c latent, got {latent.shape}")
        if self.mode == "identity":
            return latent.copy()
        return _bilinear_upsample(latent, self.factor)

    def latent_shape(self, height: int, width: int):
        f = self.factor
        return height // f, width // f, 3


def _bilinear_upsample(latent: np.ndarray, f: int) -> np.ndarray:
    """Half-pixel-aligned bilinear upsample by an integer factor, edge clamp."""
    h, w, c = latent.shape
    ho, wo = h * f, w * f
    ys = (np.arange(ho) + 0.5) / f - 0.5
    xs = (np.arange(wo) + 0.5) / f - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = latent[y0c][:, x0c] * (1 - fx)[None, :, None] \
        + latent[y0c][:, x1c] * fx[None, :, None]
    bot = latent[y1c][:, x0c] * (1 - fx)[None, :, None] \
        + latent[y1c][:, x1c] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def codec_roundtrip(image: np.ndarray, codec: Codec):
    latent = codec.encode(image)
    return latent, codec.decode(latent)


# ---------------------------------------------------------------------------
# request bundle (mirrors the wire protocol payload)


@dataclass
class DenoiserRequest:
    latent: LatentImage
    schedule: DiffusionSchedule
    disparity: np.ndarray | None = None
    text: str | None = None

    def __post_init__(self):
        if self.disparity is not None:
            self.disparity = np.asarray(self.disparity, dtype=np.float64)
            if self.disparity.shape != self.latent.data.shape[:2]:
                raise ValueError(
                    f"conditioning map {self.disparity.shape} does not match "
                    f"latent spatial dims {self.latent.data.shape[:2]}")
