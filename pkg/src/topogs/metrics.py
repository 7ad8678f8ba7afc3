"""Image quality metrics for evaluation (PSNR with a cap, SSIM)."""
from __future__ import annotations

import numpy as np

from .core import InvalidInputError
from .energy import ssim as _ssim

PSNR_CAP = 99.0


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give `cap`."""
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return float(cap)
    return float(min(cap, 10.0 * np.log10(1.0 / mse)))


def ssim(a, b) -> float:
    """Mean SSIM, 11-tap Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2."""
    a, b = _check(a, b)
    return float(_ssim(a, b))
