"""Integrated-gradient attribution for SR patches, the diffusion index, and
intermediate feature dumps."""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import tensor as T
from .errors import UsageError
from .metrics import rgb_to_y
from .tensor import Tensor

LAMP_MAGIC = b"LAMP"
DEFAULT_SIGMA = 4.0
DEFAULT_STEPS = 32

# Y = (65.481 R + 128.553 G + 24.966 B) + 16 on [0, 1] inputs
_Y_COEF = np.array([65.481, 128.553, 24.966])


@dataclass
class AttributionMap:
    saliency: np.ndarray  # (h, w) over the LR input, nonnegative
    di: float
    target_patch: tuple[int, int, int, int]  # (x, y, w, h) in SR pixels
    steps: int
    baseline_sigma: float
    attribution: np.ndarray | None = None  # signed (3, h, w) contributions
    target_input: float = math.nan
    target_baseline: float = math.nan

    @property
    def completeness_error(self) -> float:
        """``|sum(attribution) - (F(input) - F(baseline))|``."""
        return abs(float(self.attribution.sum()) - (self.target_input - self.target_baseline))


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized taps over ``ceil(4 sigma)`` samples, bumped to the next odd size."""
    if not sigma > 0:
        raise UsageError(f"sigma must be positive, got {sigma}")
    size = int(math.ceil(4 * sigma))
    if size % 2 == 0:
        size += 1
    r = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur of the last two axes with symmetric boundaries."""
    g = gaussian_kernel_1d(sigma)
    out = correlate1d(np.asarray(img, dtype=np.float64), g, axis=-2, mode="reflect")
    return correlate1d(out, g, axis=-1, mode="reflect")


def path_weights(steps: int) -> np.ndarray:
    """Trapezoid weights over ``steps`` equally spaced points on ``[0, 1]``."""
    if steps < 2:
        raise UsageError(f"steps must be >= 2, got {steps}")
    w = np.ones(steps)
    w[0] = w[-1] = 0.5
    return w / (steps - 1)


def _check_patch(patch, sr_h: int, sr_w: int) -> tuple[int, int, int, int]:
    x, y, w, h = (int(v) for v in patch)
    if w <= 0 or h <= 0:
        raise UsageError(f"degenerate patch {patch}")
    if x < 0 or y < 0 or x + w > sr_w or y + h > sr_h:
        raise UsageError(f"patch {patch} exceeds the {sr_w}x{sr_h} SR image")
    return x, y, w, h


def patch_target(sr: Tensor, patch) -> Tensor:
    """Sum of Y values inside ``patch`` for each image of an ``(N, 3, H, W)`` batch."""
    x, y, w, h = patch
    crop = T.slice_(sr, (slice(None), slice(None), slice(y, y + h), slice(x, x + w)))
    coef = Tensor(_Y_COEF.reshape(1, 3, 1, 1).astype(sr.dtype), dtype=sr.dtype)
    return T.add(T.sum_all(T.mul(crop, coef)), 16.0 * w * h * sr.shape[0])


def lam_attribute(model, lr_img, patch, steps: int = DEFAULT_STEPS, sigma: float = DEFAULT_SIGMA,
                  chunk: int = 4) -> AttributionMap:
    """Integrated gradients of the patch's Y sum along a straight path from a
    blurred copy of ``lr_img`` (``(3, h, w)`` in ``[0, 1]``) to the image itself.

    The path integral uses the trapezoid rule, so ``steps=2`` averages the two
    endpoint gradients.
    """
    weights = path_weights(steps)
    x_in = np.asarray(lr_img.data if isinstance(lr_img, Tensor) else lr_img, dtype=np.float64)
    if x_in.ndim != 3:
        raise UsageError(f"lr_img must be (3, h, w), got {x_in.shape}")
    s = model.cfg.scale
    patch = _check_patch(patch, x_in.shape[1] * s, x_in.shape[2] * s)
    base = gaussian_blur(x_in, sigma)
    delta = x_in - base
    alphas = np.linspace(0.0, 1.0, steps)
    dtype = T.get_default_dtype()
    grad_sum = np.zeros_like(x_in)
    ends = {}
    for start in range(0, steps, chunk):
        a = alphas[start:start + chunk]
        pts = Tensor((base[None] + a[:, None, None, None] * delta[None]).astype(dtype), requires_grad=True)
        with T.Tape() as tape:
            sr = model(pts)
            tgt = patch_target(sr, patch)
        T.backward(tgt, tape)
        grad_sum += np.tensordot(weights[start:start + chunk], pts.grad.astype(np.float64), axes=1)
        for i, ai in enumerate(range(start, start + len(a))):
            if ai in (0, steps - 1):
                with T.no_record():
                    one = patch_target(T.slice_(sr, (slice(i, i + 1),)), patch)
                ends[ai] = float(one.data)
    attribution = delta * grad_sum
    saliency = np.abs(attribution).sum(axis=0)
    return AttributionMap(
        saliency=saliency, di=diffusion_index(saliency) if saliency.any() else 0.0,
        target_patch=patch, steps=steps, baseline_sigma=sigma, attribution=attribution,
        target_input=ends[steps - 1], target_baseline=ends[0],
    )


def diffusion_index(saliency) -> float:
    """``100 * (1 - Gini)`` of the absolute saliency values.

    A uniform map gives 100, a single hot pixel among ``n`` gives ``100 / n``.
    Values are divided by their maximum first, so any exactly representable
    rescaling of the map leaves the result bitwise unchanged.
    """
    a = np.abs(np.asarray(saliency, dtype=np.float64)).ravel()
    if a.size == 0:
        raise UsageError("diffusion_index of an empty map")
    if not np.isfinite(a).all():
        raise UsageError("diffusion_index needs finite saliency values")
    peak = a.max()
    if peak == 0:
        raise UsageError("diffusion_index of an all-zero map")
    a = np.sort(a / peak)
    n = a.size
    ranks = 2.0 * np.arange(1, n + 1) - n - 1
    total = n * math.fsum(a)
    # 100 * (1 - G) with G = (ranks . a) / (n * sum(a)), kept as one quotient
    return 100.0 * (total - math.fsum(ranks * a)) / total


# --- output files ------------------------------------------------------------


def write_lamp(path: str, plane: np.ndarray) -> None:
    """Raw float32 little-endian plane behind a 16-byte ``LAMP`` header."""
    p = np.asarray(plane, dtype="<f4")
    if p.ndim != 2:
        raise UsageError(f"LAMP plane must be 2-D, got {p.shape}")
    with open(path, "wb") as f:
        f.write(LAMP_MAGIC + struct.pack("<III", p.shape[0], p.shape[1], 0))
        f.write(np.ascontiguousarray(p).tobytes())


def read_lamp(path: str) -> np.ndarray:
    from .errors import FormatError

    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != LAMP_MAGIC:
        raise FormatError(f"{path}: not a LAMP file")
    h, w, _ = struct.unpack_from("<III", raw, 4)
    if len(raw) != 16 + 4 * h * w:
        raise FormatError(f"{path}: payload size does not match {h}x{w}")
    return np.frombuffer(raw, "<f4", offset=16).reshape(h, w).astype(np.float32)


def heatmap(saliency: np.ndarray, lr_img: np.ndarray | None = None) -> np.ndarray:
    """``(3, h, w)`` black-red-yellow-white rendering in ``[0, 1]``.

    With ``lr_img`` the heat is blended over a dimmed grayscale copy of it.
    """
    s = np.asarray(saliency, dtype=np.float64)
    peak = s.max()
    t = s / peak if peak > 0 else np.zeros_like(s)
    rgb = np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1), np.clip(3 * t - 2, 0, 1)])
    if lr_img is not None:
        gray = (rgb_to_y(lr_img) - 16.0) / 219.0
        rgb = 0.35 * gray[None] + 0.65 * rgb
    return rgb


def _minmax(plane: np.ndarray) -> np.ndarray:
    lo, hi = plane.min(), plane.max()
    if hi - lo <= 0:
        return np.full(plane.shape, 0.5)
    return (plane - lo) / (hi - lo)


def dump_features(model, lr_img, after_group: int, out_dir: str, prefix: str = "feat") -> list[str]:
    """Write each channel of the features after group ``after_group`` (1-based)
    as a min-max normalized grayscale PNG, plus one channel-mean image.

    Returns the ``C + 1`` written paths.
    """
    from .io import save_image

    n = model.cfg.num_rhag
    if not 1 <= after_group <= n:
        raise UsageError(f"after_group must be in 1..{n}, got {after_group}")
    x = np.asarray(lr_img.data if isinstance(lr_img, Tensor) else lr_img)
    if x.ndim == 3:
        x = x[None]
    with T.no_record():
        feat = model.forward_features(Tensor(x), stop_after_group=after_group).data[0]
    feat = feat.astype(np.float64)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for c in range(feat.shape[-1]):
        p = os.path.join(out_dir, f"{prefix}_g{after_group}_c{c:03d}.png")
        save_image(_minmax(feat[..., c]), p)
        paths.append(p)
    p = os.path.join(out_dir, f"{prefix}_g{after_group}_mean.png")
    save_image(_minmax(feat.mean(axis=-1)), p)
    paths.append(p)
    return paths
