"""Window partitioning, (shifted) window self-attention and overlapping cross-attention.

Features are channels-last ``(N, H, W, C)``.  Windows are tiled row-major, and
a window tensor has shape ``(N * num_windows, tokens, C)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import LinearParams, linear, trunc_normal
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowGrid:
    window_size: int
    shift: int
    padded_h: int
    padded_w: int

    def __post_init__(self):
        m = self.window_size
        if self.padded_h % m or self.padded_w % m:
            raise DimensionError(f"grid {self.padded_h}x{self.padded_w} not divisible by window {m}")
        if self.shift not in (0, m // 2):
            raise ConfigError(f"shift must be 0 or {m // 2}, got {self.shift}")

    @property
    def num_windows(self) -> int:
        return self.padded_h * self.padded_w // (self.window_size ** 2)


@dataclass
class AttentionParams:
    """Fused QKV projection, output projection and relative-position bias table."""

    qkv: LinearParams
    proj: LinearParams
    bias_table: Tensor  # (heads, table_len)


def init_attention(rng, c: int, heads: int, table_len: int) -> AttentionParams:
    from .layers import init_linear

    table = Tensor(trunc_normal(rng, (heads, table_len)), requires_grad=True)
    return AttentionParams(init_linear(rng, c, 3 * c), init_linear(rng, c, c), table)


# --- relative position indexing ----------------------------------------------


@lru_cache(maxsize=None)
def relative_position_index(m: int) -> np.ndarray:
    """Table index for every (query, key) pair inside an ``m x m`` window."""
    return overlap_relative_position_index(m, m)


@lru_cache(maxsize=None)
def overlap_relative_position_index(m: int, mo: int) -> np.ndarray:
    """Index map of shape ``(m*m, mo*mo)`` into a table of ``(m + mo - 1)**2`` entries.

    The key window is centered on the query window, so key ``(k, l)`` sits at
    offset ``(k - p, l - p)`` from the query window origin with ``p = (mo - m) / 2``.
    """
    if (mo - m) % 2:
        raise ConfigError(f"overlap window {mo} must exceed window {m} by an even amount")
    qi, qj = np.divmod(np.arange(m * m), m)
    ki, kj = np.divmod(np.arange(mo * mo), mo)
    side = m + mo - 1
    dr = ki[None, :] - qi[:, None] + (m - 1)
    dc = kj[None, :] - qj[:, None] + (m - 1)
    idx = dr * side + dc
    idx.setflags(write=False)
    return idx


def relative_bias(table: Tensor, index: np.ndarray) -> Tensor:
    """Assemble the per-head bias matrix ``(heads, Tq, Tk)`` from a table."""
    return T.take(table, index)


# --- partitioning ------------------------------------------------------------


def window_partition(x: Tensor, m: int) -> Tensor:
    n, h, w, c = x.shape
    if h % m or w % m:
        raise DimensionError(f"window_partition: {h}x{w} not divisible by window {m}")
    y = T.reshape(x, (n, h // m, m, w // m, m, c))
    y = T.permute(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (n * (h // m) * (w // m), m * m, c))


def window_reverse(windows: Tensor, grid: WindowGrid) -> Tensor:
    m = grid.window_size
    nh, nw = grid.padded_h // m, grid.padded_w // m
    b, t, c = windows.shape
    if t != m * m or b % (nh * nw):
        raise DimensionError(f"window_reverse: {windows.shape} inconsistent with {grid}")
    n = b // (nh * nw)
    y = T.reshape(windows, (n, nh, nw, m, m, c))
    y = T.permute(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (n, grid.padded_h, grid.padded_w, c))


def overlap_size(m: int, gamma: float) -> tuple[int, int]:
    """Return ``(mo, pad)`` with ``mo = (1 + 2*gamma) * m`` and ``pad = gamma * m``."""
    pad = gamma * m
    if abs(pad - round(pad)) > 1e-9:
        raise ConfigError(f"overlap padding gamma*M = {pad} is not an integer")
    pad = int(round(pad))
    return m + 2 * pad, pad


def overlap_unfold(x: Tensor, m: int, gamma: float) -> Tensor:
    """Overlapping ``mo x mo`` windows with stride ``m`` over a zero-padded copy of ``x``."""
    n, h, w, c = x.shape
    if h % m or w % m:
        raise DimensionError(f"overlap_unfold: {h}x{w} not divisible by window {m}")
    mo, pad = overlap_size(m, gamma)
    if pad == 0:
        return window_partition(x, m)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    nh, nw = h // m, w // m
    view = np.lib.stride_tricks.sliding_window_view(xp, (mo, mo), axis=(1, 2))[:, ::m, ::m]
    # view: (n, nh, nw, c, mo, mo)
    out = np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3)).reshape(n * nh * nw, mo * mo, c)

    def vjp(g):
        g6 = g.reshape(n, nh, nw, mo, mo, c)
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for a in range(nh):
            for b in range(nw):
                gp[:, a * m:a * m + mo, b * m:b * m + mo, :] += g6[:, a, b]
        return (np.ascontiguousarray(gp[:, pad:pad + h, pad:pad + w, :]),)

    return T.apply_op(out, (x,), vjp, "overlap_unfold")


# --- masks -------------------------------------------------------------------


def region_labels(grid: WindowGrid) -> np.ndarray:
    """Integer label of the pre-shift image region each padded pixel came from."""
    m, s = grid.window_size, grid.shift
    labels = np.zeros((grid.padded_h, grid.padded_w), dtype=np.int64)
    cuts = (slice(0, -m), slice(-m, -s), slice(-s, None))
    cnt = 0
    for hs in cuts:
        for ws in cuts:
            labels[hs, ws] = cnt
            cnt += 1
    return labels


@lru_cache(maxsize=64)
def _shift_mask(grid: WindowGrid) -> np.ndarray:
    m = grid.window_size
    labels = region_labels(grid)
    nh, nw = grid.padded_h // m, grid.padded_w // m
    win = labels.reshape(nh, m, nw, m).transpose(0, 2, 1, 3).reshape(nh * nw, m * m)
    mask = np.where(win[:, :, None] != win[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


def build_shift_mask(grid: WindowGrid) -> np.ndarray | None:
    """Additive mask ``(num_windows, M*M, M*M)``; ``None`` when the grid is unshifted."""
    if grid.shift == 0:
        return None
    return _shift_mask(grid)


# --- attention kernels -------------------------------------------------------


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, c = t.shape
    return T.permute(T.reshape(t, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int, bias: Tensor,
            mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
    """Multi-head attention over window batches; returns (output, attention weights)."""
    b, tq, c = q.shape
    d = c // heads
    qh = T.scale(_split_heads(q, heads), 1.0 / math.sqrt(d))
    kt = T.permute(T.reshape(k, (b, k.shape[1], heads, d)), (0, 2, 3, 1))
    vh = _split_heads(v, heads)
    logits = T.add(T.matmul(qh, kt), bias)  # (b, heads, tq, tk)
    if mask is not None:
        nw = mask.shape[0]
        tk = k.shape[1]
        logits = T.reshape(logits, (b // nw, nw, heads, tq, tk))
        logits = T.add(logits, Tensor(mask[None, :, None].astype(logits.dtype)))
        logits = T.reshape(logits, (b, heads, tq, tk))
    attn = T.softmax_lastdim(logits)
    out = T.reshape(T.permute(T.matmul(attn, vh), (0, 2, 1, 3)), (b, tq, c))
    return out, attn


def _check_heads(c: int, heads: int) -> None:
    if heads < 1 or c % heads:
        raise ConfigError(f"channels {c} not divisible by {heads} heads")


def _pad_to_multiple(x: Tensor, m: int) -> tuple[Tensor, int, int]:
    n, h, w, c = x.shape
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = T.pad_reflect(x, ((0, 0), (0, ph), (0, pw), (0, 0)))
    return x, h, w


def wmsa(x: Tensor, p: AttentionParams, m: int, heads: int, shift: int = 0,
         return_attn: bool = False):
    """(Shifted) window multi-head self-attention on ``(N, H, W, C)`` features.

    Sizes that are not multiples of ``m`` are reflect-padded and cropped back.
    """
    n, h0, w0, c = x.shape
    _check_heads(c, heads)
    if shift not in (0, m // 2) or (shift and m < 2):
        raise ConfigError(f"shift must be 0 or {m // 2}, got {shift}")
    x, h0, w0 = _pad_to_multiple(x, m)
    grid = WindowGrid(m, shift, x.shape[1], x.shape[2])
    if shift:
        x = T.roll(x, (-shift, -shift), (1, 2))
    win = window_partition(x, m)
    qkv = linear(win, p.qkv)
    q = T.slice_(qkv, (slice(None), slice(None), slice(0, c)))
    k = T.slice_(qkv, (slice(None), slice(None), slice(c, 2 * c)))
    v = T.slice_(qkv, (slice(None), slice(None), slice(2 * c, 3 * c)))
    bias = relative_bias(p.bias_table, relative_position_index(m))
    out, attn = _attend(q, k, v, heads, bias, build_shift_mask(grid))
    out = window_reverse(linear(out, p.proj), grid)
    if shift:
        out = T.roll(out, (shift, shift), (1, 2))
    if out.shape[1] != h0 or out.shape[2] != w0:
        out = T.slice_(out, (slice(None), slice(0, h0), slice(0, w0)))
    return (out, attn) if return_attn else out


def oca(x: Tensor, p: AttentionParams, m: int, gamma: float, heads: int,
        return_attn: bool = False):
    """Overlapping cross-attention: queries from ``m x m`` windows, keys/values
    from zero-padded ``mo x mo`` windows centered on them."""
    n, h0, w0, c = x.shape
    _check_heads(c, heads)
    mo, _ = overlap_size(m, gamma)
    x, h0, w0 = _pad_to_multiple(x, m)
    grid = WindowGrid(m, 0, x.shape[1], x.shape[2])
    qkv = linear(x, p.qkv)
    q = T.slice_(qkv, (slice(None), slice(None), slice(None), slice(0, c)))
    kv = T.slice_(qkv, (slice(None), slice(None), slice(None), slice(c, 3 * c)))
    qw = window_partition(q, m)
    kvw = overlap_unfold(kv, m, gamma)
    k = T.slice_(kvw, (slice(None), slice(None), slice(0, c)))
    v = T.slice_(kvw, (slice(None), slice(None), slice(c, 2 * c)))
    bias = relative_bias(p.bias_table, overlap_relative_position_index(m, mo))
    out, attn = _attend(qw, k, v, heads, bias, None)
    out = window_reverse(linear(out, p.proj), grid)
    if out.shape[1] != h0 or out.shape[2] != w0:
        out = T.slice_(out, (slice(None), slice(0, h0), slice(0, w0)))
    return (out, attn) if return_attn else out
