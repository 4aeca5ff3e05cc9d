"""Y-channel PSNR and SSIM in the usual super-resolution evaluation setting."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, UsageError
from .tensor import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass
class MetricResult:
    psnr_db: float
    ssim: float
    crop_border: int
    channel: str = "Y"


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def rgb_to_y(img) -> np.ndarray:
    """``(3, H, W)`` RGB in ``[0, 1]`` to BT.601 studio-swing luma in ``[16, 235]``."""
    a = _arr(img)
    if a.ndim != 3 or a.shape[0] != 3:
        raise DimensionError(f"rgb_to_y expects (3, H, W), got {a.shape}")
    # integer coefficients keep the black/white endpoints exact
    return (65481.0 * a[0] + 128553.0 * a[1] + 24966.0 * a[2]) / 1000.0 + 16.0


def _crop(a: np.ndarray, crop: int) -> np.ndarray:
    if crop < 0:
        raise UsageError(f"crop must be >= 0, got {crop}")
    if crop:
        a = a[crop:-crop, crop:-crop]
    return a


def _pair(a, b, crop: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise DimensionError(f"planes differ in shape: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise DimensionError(f"expected 2-D planes, got {a.shape}")
    a, b = _crop(a, crop), _crop(b, crop)
    if a.size == 0:
        raise UsageError(f"crop {crop} leaves an empty region")
    return a, b


def psnr(a, b, peak: float = 255.0, crop: int = 0) -> float:
    """PSNR in dB; ``math.inf`` for identical planes."""
    a, b = _pair(a, b, crop)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(a, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_map(a, b, crop: int = 0, peak: float = 255.0) -> np.ndarray:
    a, b = _pair(a, b, crop)
    if min(a.shape) < SSIM_WINDOW:
        raise UsageError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} after crop, got {a.shape}")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, crop: int = 0, peak: float = 255.0) -> float:
    """Mean SSIM over the valid region of an 11x11 Gaussian window (sigma 1.5)."""
    return float(ssim_map(a, b, crop, peak).mean())


def evaluate_pair(sr, hr, crop: int, channel: str = "Y") -> MetricResult:
    """Metrics between two ``(3, H, W)`` images in ``[0, 1]``."""
    sr_a, hr_a = _arr(sr), _arr(hr)
    if channel == "Y":
        p = rgb_to_y(sr_a), rgb_to_y(hr_a)
        return MetricResult(psnr(*p, crop=crop), ssim(*p, crop=crop), crop, "Y")
    if channel == "RGB":
        a = np.stack([_crop(x * 255.0, crop) for x in sr_a])
        b = np.stack([_crop(x * 255.0, crop) for x in hr_a])
        if a.size == 0:
            raise UsageError(f"crop {crop} leaves an empty region")
        mse = float(np.mean((a - b) ** 2))
        val = math.inf if mse == 0 else 10.0 * math.log10(255.0 ** 2 / mse)
        s_val = float(np.mean([ssim(x, y) for x, y in zip(a, b)]))
        return MetricResult(val, s_val, crop, "RGB")
    raise UsageError(f"channel must be 'Y' or 'RGB', got {channel!r}")
