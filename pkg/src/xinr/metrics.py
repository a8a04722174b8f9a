"""Volume comparison metrics: PSNR and maximum difference."""

from __future__ import annotations

import numpy as np

__all__ = ["psnr", "max_difference", "PSNR_CAP_DB"]

PSNR_CAP_DB = 99.0


def psnr(a, b, data_range: float) -> float:
    """10 log10(range^2 / MSE); identical inputs report the 99 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(data_range ** 2 / mse), PSNR_CAP_DB)


def max_difference(a, b) -> float:
    """Max |a - b| over voxels; callers pass [0, 1]-normalized values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.max(np.abs(a - b)))
