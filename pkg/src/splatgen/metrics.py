"""Image and buffer quality metrics."""

from __future__ import annotations

import numpy as np

PSNR_CAP = 99.0


def psnr(image: np.ndarray, reference: np.ndarray,
         data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped so identical inputs stay finite."""
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch {image.shape} vs {reference.shape}")
    mse = np.mean((image - reference) ** 2)
    if mse <= 0.0:
        return PSNR_CAP
    value = 10.0 * np.log10(data_range * data_range / mse)
    return float(min(value, PSNR_CAP))


def mean_angular_error_deg(normals: np.ndarray, reference: np.ndarray,
                           mask: np.ndarray | None = None) -> float:
    """Mean angle in degrees between unit normal maps.

    Pixels where either map is zero (background) are excluded; an explicit
    mask restricts further. Returns 0 when no pixel qualifies.
    """
    normals = np.asarray(normals, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if normals.shape != reference.shape:
        raise ValueError("normal map shapes differ")
    valid = (np.linalg.norm(normals, axis=-1) > 0.5) \
        & (np.linalg.norm(reference, axis=-1) > 0.5)
    if mask is not None:
        valid &= mask.astype(bool)
    if not valid.any():
        return 0.0
    a = normals[valid]
    b = reference[valid]
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    dots = np.clip((a * b).sum(axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dots)).mean())


def masked_mae(values: np.ndarray, reference: np.ndarray,
               mask: np.ndarray) -> float:
    """Mean absolute error over masked pixels; 0 for an empty mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    diff = np.asarray(values, dtype=np.float64) \
        - np.asarray(reference, dtype=np.float64)
    return float(np.abs(diff[mask]).mean())
