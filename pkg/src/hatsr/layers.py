"""Parameterized layers: convolution, layer norm, linear/MLP, channel attention, pixel shuffle.

Public functions take NCHW images (or tokens-last tensors for the
Transformer layers).  The ``*_nhwc`` variants run the same math on
channels-last features and are what the network uses internally, since
tokens stay channels-last between attention and convolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class Conv2dParams:
    weight: Tensor  # (out_ch, in_ch, kh, kw)
    bias: Tensor | None
    stride: int = 1
    padding: int = 0

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"layer norm eps must be positive, got {self.eps}")


@dataclass
class LinearParams:
    weight: Tensor  # (out, in)
    bias: Tensor | None


@dataclass
class MLPParams:
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class CABParams:
    conv1: Conv2dParams
    conv2: Conv2dParams
    ca_down: Conv2dParams
    ca_up: Conv2dParams
    squeeze_beta: int = 3
    ca_reduction_r: int = 16
    depthwise: bool = field(default=False, repr=False)
    dw1: Conv2dParams | None = None  # depthwise 3x3 ahead of conv1 (then 1x1)
    dw2: Conv2dParams | None = None


# --- initializers ------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=None) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype or T.get_default_dtype())


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> np.ndarray:
    # bound 1/sqrt(fan_in): kaiming-uniform with negative slope sqrt(5)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype or T.get_default_dtype())


def init_conv(rng, cin: int, cout: int, k: int, bias: bool = True) -> Conv2dParams:
    fan_in = cin * k * k
    w = Tensor(kaiming_uniform(rng, (cout, cin, k, k), fan_in), requires_grad=True)
    b = Tensor(kaiming_uniform(rng, (cout,), fan_in), requires_grad=True) if bias else None
    return Conv2dParams(w, b, 1, (k - 1) // 2)


def init_linear(rng, fin: int, fout: int) -> LinearParams:
    w = Tensor(trunc_normal(rng, (fout, fin)), requires_grad=True)
    b = Tensor(np.zeros(fout, dtype=T.get_default_dtype()), requires_grad=True)
    return LinearParams(w, b)


def init_layer_norm(c: int) -> LayerNormParams:
    dt = T.get_default_dtype()
    return LayerNormParams(Tensor(np.ones(c, dt), requires_grad=True),
                           Tensor(np.zeros(c, dt), requires_grad=True))


def init_mlp(rng, c: int, hidden_ratio: float) -> MLPParams:
    hidden = mlp_hidden(c, hidden_ratio)
    return MLPParams(init_linear(rng, c, hidden), init_linear(rng, hidden, c))


def init_depthwise(rng, c: int, k: int) -> Conv2dParams:
    w = Tensor(kaiming_uniform(rng, (c, 1, k, k), k * k), requires_grad=True)
    b = Tensor(kaiming_uniform(rng, (c,), k * k), requires_grad=True)
    return Conv2dParams(w, b, 1, (k - 1) // 2)


def init_cab(rng, c: int, beta: int, reduction: int, depthwise: bool = False) -> CABParams:
    mid = cab_width(c, beta)
    squeeze = ca_width(c, reduction)
    if depthwise:
        dw1 = init_depthwise(rng, c, 3)
        conv1 = init_conv(rng, c, mid, 1)
        dw2 = init_depthwise(rng, mid, 3)
        conv2 = init_conv(rng, mid, c, 1)
    else:
        dw1 = dw2 = None
        conv1 = init_conv(rng, c, mid, 3)
        conv2 = init_conv(rng, mid, c, 3)
    return CABParams(
        conv1=conv1,
        conv2=conv2,
        ca_down=init_conv(rng, c, squeeze, 1),
        ca_up=init_conv(rng, squeeze, c, 1),
        squeeze_beta=beta,
        ca_reduction_r=reduction,
        depthwise=depthwise,
        dw1=dw1,
        dw2=dw2,
    )


def mlp_hidden(c: int, ratio: float) -> int:
    hidden = c * ratio
    if abs(hidden - round(hidden)) > 1e-9:
        raise ConfigError(f"MLP hidden width {c}*{ratio} is not an integer")
    return int(round(hidden))


def cab_width(c: int, beta: int) -> int:
    if beta < 1 or c % beta:
        raise ConfigError(f"CAB channels {c} not divisible by squeeze factor {beta}")
    return c // beta


def ca_width(c: int, reduction: int) -> int:
    # floor division as in the RCAN channel-attention layer; 180 // 16 == 11
    if reduction < 1 or c // reduction < 1:
        raise ConfigError(f"channel attention reduction {reduction} too large for {c} channels")
    return c // reduction


# --- convolution -------------------------------------------------------------


def conv2d_nhwc(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation on channels-last input ``(N, H, W, Cin)``."""
    w = p.weight.data
    cout, cin, kh, kw = w.shape
    if x.ndim != 4 or x.shape[-1] != cin:
        raise DimensionError(f"conv2d: input {x.shape} does not match weight {w.shape}")
    s, pad = p.stride, p.padding
    n, h, wd, _ = x.shape
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise DimensionError(f"conv2d: input {x.shape} smaller than kernel {kh}x{kw}")
    if s == 1 and kh == kw and pad == (kh - 1) // 2 and cout < cin:
        return _conv_same_scatter(x, p)
    return _conv_im2col(x, p)


def _offsets(kh: int, kw: int):
    return [(i, j) for i in range(kh) for j in range(kw)]


def _conv_im2col(x: Tensor, p: Conv2dParams) -> Tensor:
    # gathers input patches; cheapest when cin <= cout
    w = p.weight.data
    cout, cin, kh, kw = w.shape
    s, pad = p.stride, p.padding
    n, h, wd, _ = x.shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data

    one = kh == kw == 1 and s == 1
    if one:
        cols = xp.reshape(-1, cin)
    else:
        cols = np.concatenate(
            [xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] for i, j in _offsets(kh, kw)],
            axis=-1,
        ).reshape(-1, kh * kw * cin)
    wmat = w.transpose(0, 2, 3, 1).reshape(cout, -1)  # (cout, kh*kw*cin)
    out = cols @ wmat.T
    if p.bias is not None:
        out += p.bias.data
    out = out.reshape(n, ho, wo, cout)
    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gw = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2) if p.weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh * kw, cin)
            if one:
                gxp = dcols.reshape(n, ho, wo, cin)
            else:
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for t, (i, j) in enumerate(_offsets(kh, kw)):
                    gxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, t, :]
            gx = np.ascontiguousarray(gxp[:, pad:pad + h, pad:pad + wd, :]) if pad else gxp
        if p.bias is None:
            return gx, gw
        return gx, gw, T.colsum(g2)

    return T.apply_op(out, inputs, vjp, "conv2d")


def _conv_same_scatter(x: Tensor, p: Conv2dParams) -> Tensor:
    # projects every pixel to all kernel taps first, then sums shifted taps;
    # cheapest when cout < cin (stride 1, "same" padding only)
    w = p.weight.data
    cout, cin, k, _ = w.shape
    pad = p.padding
    n, h, wd, _ = x.shape
    offs = _offsets(k, k)
    wcat = w.transpose(1, 2, 3, 0).reshape(cin, k * k * cout)  # (cin, taps*cout)
    x2 = x.data.reshape(-1, cin)
    z = (x2 @ wcat).reshape(n, h, wd, k * k, cout)
    zp = np.pad(z, ((0, 0), (pad, pad), (pad, pad), (0, 0), (0, 0)))
    out = np.zeros((n, h, wd, cout), dtype=z.dtype)
    for t, (i, j) in enumerate(offs):
        out += zp[:, i:i + h, j:j + wd, t, :]
    if p.bias is not None:
        out += p.bias.data
    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)

    def vjp(g):
        gp = np.pad(g, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        gz = np.stack([gp[:, 2 * pad - i:2 * pad - i + h, 2 * pad - j:2 * pad - j + wd, :] for i, j in offs],
                      axis=3).reshape(-1, k * k * cout)
        gx = (gz @ wcat.T).reshape(x.shape) if x.requires_grad else None
        gw = None
        if p.weight.requires_grad:
            gw = (x2.T @ gz).reshape(cin, k, k, cout).transpose(3, 0, 1, 2)
        if p.bias is None:
            return gx, gw
        return gx, gw, T.colsum(g.reshape(-1, cout))

    return T.apply_op(out, inputs, vjp, "conv2d")


def depthwise_conv2d_nhwc(x: Tensor, p: Conv2dParams) -> Tensor:
    """Per-channel ``k x k`` cross-correlation, weight ``(C, 1, k, k)``, stride 1."""
    w = p.weight.data
    c, one, kh, kw = w.shape
    if one != 1 or x.ndim != 4 or x.shape[-1] != c:
        raise DimensionError(f"depthwise conv: input {x.shape} does not match weight {w.shape}")
    if p.stride != 1:
        raise DimensionError("depthwise conv supports stride 1 only")
    pad = p.padding
    n, h, wd, _ = x.shape
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    taps = w[:, 0].transpose(1, 2, 0)  # (kh, kw, C)
    out = np.zeros((n, ho, wo, c), dtype=xp.dtype)
    for i, j in _offsets(kh, kw):
        out += xp[:, i:i + ho, j:j + wo, :] * taps[i, j]
    if p.bias is not None:
        out += p.bias.data
    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)

    def vjp(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gw = np.zeros((kh, kw, c), dtype=g.dtype)
        for i, j in _offsets(kh, kw):
            gxp[:, i:i + ho, j:j + wo, :] += g * taps[i, j]
            gw[i, j] = T.colsum((g * xp[:, i:i + ho, j:j + wo, :]).reshape(-1, c))
        gx = np.ascontiguousarray(gxp[:, pad:pad + h, pad:pad + wd, :])
        gw = gw.transpose(2, 0, 1)[:, None]
        if p.bias is None:
            return gx, gw
        return gx, gw, T.colsum(g.reshape(-1, c))

    return T.apply_op(out, inputs, vjp, "depthwise_conv2d")


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation plus bias on NCHW input (no kernel flip)."""
    if x.ndim != 4 or x.shape[1] != p.in_channels:
        raise DimensionError(f"conv2d: input {x.shape} does not match weight {p.weight.shape}")
    return T.permute(conv2d_nhwc(T.permute(x, (0, 2, 3, 1)), p), (0, 3, 1, 2))


# --- normalization / linear --------------------------------------------------


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    """Normalize over the last axis, then apply the per-channel affine."""
    c = x.shape[-1]
    if p.gamma.shape != (c,):
        raise DimensionError(f"layer_norm: last dim {c} does not match gamma {p.gamma.shape}")
    xd = x.data
    inv_c = 1.0 / c
    mu = T.rowsum(xd) * inv_c
    xc = xd - mu
    var = T.rowsum(xc * xc) * inv_c
    rstd = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * rstd
    out = xhat * p.gamma.data + p.beta.data

    def vjp(g):
        g2 = g.reshape(-1, c)
        dgamma = T.colsum((g * xhat).reshape(-1, c))
        dbeta = T.colsum(g2)
        dxhat = g * p.gamma.data
        dx = rstd * (dxhat - T.rowsum(dxhat) * inv_c - xhat * (T.rowsum(dxhat * xhat) * inv_c))
        return dx, dgamma, dbeta

    return T.apply_op(out.astype(xd.dtype, copy=False), (x, p.gamma, p.beta), vjp, "layer_norm")


def linear(x: Tensor, p: LinearParams) -> Tensor:
    fout, fin = p.weight.shape
    if x.shape[-1] != fin:
        raise DimensionError(f"linear: input {x.shape} does not match weight {p.weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, fin)
    out = x2 @ p.weight.data.T
    if p.bias is not None:
        out += p.bias.data
    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)

    def vjp(g):
        g2 = g.reshape(-1, fout)
        gx = (g2 @ p.weight.data).reshape(lead + (fin,)) if x.requires_grad else None
        gw = g2.T @ x2 if p.weight.requires_grad else None
        if p.bias is None:
            return gx, gw
        return gx, gw, T.colsum(g2)

    return T.apply_op(out.reshape(lead + (fout,)), inputs, vjp, "linear")


def mlp(x: Tensor, p: MLPParams) -> Tensor:
    """linear -> GELU -> linear over the last axis."""
    return linear(T.gelu(linear(x, p.fc1)), p.fc2)


# --- channel attention -------------------------------------------------------


def channel_attention_nhwc(x: Tensor, p: CABParams) -> Tensor:
    pooled = T.mean_over(x, (1, 2), keepdims=True)  # (N,1,1,C)
    s = T.sigmoid(conv2d_nhwc(T.relu(conv2d_nhwc(pooled, p.ca_down)), p.ca_up))
    return T.mul(x, s)


def cab_forward_nhwc(x: Tensor, p: CABParams) -> Tensor:
    if p.depthwise:
        h = T.gelu(conv2d_nhwc(depthwise_conv2d_nhwc(x, p.dw1), p.conv1))
        h = conv2d_nhwc(depthwise_conv2d_nhwc(h, p.dw2), p.conv2)
    else:
        h = conv2d_nhwc(T.gelu(conv2d_nhwc(x, p.conv1)), p.conv2)
    return channel_attention_nhwc(h, p)


def channel_attention(x: Tensor, p: CABParams) -> Tensor:
    """Rescale each channel of NCHW ``x`` by a sigmoid gate from its global mean."""
    return T.permute(channel_attention_nhwc(T.permute(x, (0, 2, 3, 1)), p), (0, 3, 1, 2))


def cab_forward(x: Tensor, p: CABParams) -> Tensor:
    """Channel attention block on NCHW input: conv, GELU, conv, then CA."""
    return T.permute(cab_forward_nhwc(T.permute(x, (0, 2, 3, 1)), p), (0, 3, 1, 2))


# --- pixel shuffle -----------------------------------------------------------


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """``out[n, c, h*r+i, w*r+j] = in[n, c*r*r + i*r + j, h, w]``."""
    n, crr, h, w = x.shape
    if crr % (r * r):
        raise DimensionError(f"pixel_shuffle: {crr} channels not divisible by {r}^2")
    c = crr // (r * r)
    y = T.reshape(x, (n, c, r, r, h, w))
    y = T.permute(y, (0, 1, 4, 2, 5, 3))
    return T.reshape(y, (n, c, h * r, w * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    n, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise DimensionError(f"pixel_unshuffle: spatial dims {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    y = T.reshape(x, (n, c, h, r, w, r))
    y = T.permute(y, (0, 1, 3, 5, 2, 4))
    return T.reshape(y, (n, c * r * r, h, w))


def pixel_shuffle_nhwc(x: Tensor, r: int) -> Tensor:
    n, h, w, crr = x.shape
    if crr % (r * r):
        raise DimensionError(f"pixel_shuffle: {crr} channels not divisible by {r}^2")
    c = crr // (r * r)
    y = T.reshape(x, (n, h, w, c, r, r))
    y = T.permute(y, (0, 1, 4, 2, 5, 3))
    return T.reshape(y, (n, h * r, w * r, c))
