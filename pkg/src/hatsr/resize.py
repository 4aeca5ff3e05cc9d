"""MATLAB-compatible bicubic resizing (``imresize(..., 'bicubic')``).

The cubic kernel uses ``a = -0.5``.  When shrinking with antialiasing the
kernel is stretched by ``1/scale`` and compressed in height by ``scale``, and
image borders are handled by symmetric (edge-repeating) extension.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


def cubic(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return ((1.5 * ax3 - 2.5 * ax2 + 1) * (ax <= 1)
            + (-0.5 * ax3 + 2.5 * ax2 - 4 * ax + 2) * ((ax > 1) & (ax <= 2)))


@lru_cache(maxsize=128)
def resize_matrix(in_len: int, out_len: int, scale: float, antialias: bool = True) -> np.ndarray:
    """Dense ``(out_len, in_len)`` interpolation matrix along one axis."""
    shrink = scale < 1 and antialias
    width = 4.0 / scale if shrink else 4.0
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)  # output pixel centre in input coordinates (1-based)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    ind = left[:, None] + np.arange(taps)[None, :]
    dist = u[:, None] - ind
    w = scale * cubic(scale * dist) if shrink else cubic(dist)
    w = w / w.sum(axis=1, keepdims=True)
    # symmetric extension: ... 2 1 | 1 2 ... n | n n-1 ...
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    src = mirror[((ind - 1).astype(np.int64)) % (2 * in_len)]
    mat = np.zeros((out_len, in_len))
    np.add.at(mat, (np.repeat(np.arange(out_len), taps), src.reshape(-1)), w.reshape(-1))
    mat.setflags(write=False)
    return mat


def output_size(n: int, scale: float) -> int:
    # the tiny slack keeps e.g. 64 * (1/4) from rounding up to 17
    return int(math.ceil(n * scale - 1e-9))


def bicubic_resize(img, scale: float, antialias: bool = True):
    """Resize the last two axes of ``img`` by ``scale``.

    Accepts a numpy array or a :class:`~hatsr.tensor.Tensor`; returns the
    same kind (tensors come back detached).
    """
    from .tensor import Tensor

    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    is_tensor = isinstance(img, Tensor)
    arr = img.data if is_tensor else np.asarray(img)
    dtype = arr.dtype if arr.dtype.kind == "f" else np.float64
    h, w = arr.shape[-2:]
    oh, ow = output_size(h, scale), output_size(w, scale)
    mh = resize_matrix(h, oh, float(scale), antialias)
    mw = resize_matrix(w, ow, float(scale), antialias)
    out = np.einsum("ih,...hw,jw->...ij", mh, arr.astype(np.float64), mw, optimize=True)
    out = out.astype(dtype)
    return Tensor(out, dtype=dtype) if is_tensor else out
