"""Hybrid attention blocks, residual groups and the full super-resolution network."""
from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionParams, init_attention, oca, overlap_size, wmsa
from .errors import ConfigError, DimensionError
from .layers import (
    CABParams, Conv2dParams, LayerNormParams, MLPParams, cab_forward_nhwc, cab_width,
    ca_width, conv2d_nhwc, init_cab, init_conv, init_layer_norm, init_mlp, layer_norm,
    mlp, mlp_hidden, pixel_shuffle_nhwc,
)
from .tensor import Tensor


@dataclass
class ModelConfig:
    in_channels: int = 3
    embed_dim: int = 180
    num_rhag: int = 6
    habs_per_rhag: int = 6
    window_size: int = 16
    num_heads: int = 6
    alpha: float = 0.01
    cab_beta: int = 3
    oca_gamma: float = 0.5
    mlp_ratio: float = 2.0
    ca_reduction: int = 16
    scale: int = 4
    enable_cab: bool = True
    enable_ocab: bool = True
    cab_depthwise: bool = False
    upsample_channels: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        c = self.embed_dim
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3 or 4, got {self.scale}")
        if min(self.in_channels, c, self.num_rhag, self.habs_per_rhag, self.window_size,
               self.upsample_channels) < 1:
            raise ConfigError("channel, depth and window sizes must be positive")
        if self.num_heads < 1 or c % self.num_heads:
            raise ConfigError(f"embed_dim {c} not divisible by num_heads {self.num_heads}")
        if self.enable_cab:
            cab_width(c, self.cab_beta)
            ca_width(c, self.ca_reduction)
        if self.enable_ocab:
            overlap_size(self.window_size, self.oca_gamma)
        mlp_hidden(c, self.mlp_ratio)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ParamTree(OrderedDict):
    """Ordered ``dotted.name -> Tensor`` map of learnable tensors."""

    def num_scalars(self) -> int:
        return sum(t.size for t in self.values())

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.items())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None


class _Registry:
    def __init__(self, tree: ParamTree):
        self.tree = tree

    def add(self, name: str, obj):
        if isinstance(obj, Tensor):
            if name in self.tree:
                raise ValueError(f"duplicate parameter name {name}")
            self.tree[name] = obj
        elif dataclasses.is_dataclass(obj):
            for f in dataclasses.fields(obj):
                val = getattr(obj, f.name)
                if isinstance(val, Tensor) or dataclasses.is_dataclass(val):
                    self.add(f"{name}.{f.name}", val)
        return obj


@dataclass
class HABParams:
    norm1: LayerNormParams
    attn: AttentionParams
    cab: CABParams | None
    norm2: LayerNormParams
    mlp: MLPParams


@dataclass
class OCABParams:
    norm1: LayerNormParams
    attn: AttentionParams
    norm2: LayerNormParams
    mlp: MLPParams


@dataclass
class RHAGParams:
    blocks: list[HABParams]
    ocab: OCABParams | None
    conv: Conv2dParams


@dataclass
class UpsampleParams:
    conv_before: Conv2dParams
    stages: list[Conv2dParams] = field(default_factory=list)
    factors: list[int] = field(default_factory=list)
    conv_last: Conv2dParams | None = None


def upsample_factors(scale: int) -> list[int]:
    # x4 is two x2 stages, x2/x3 a single stage
    return [2, 2] if scale == 4 else [scale]


def shift_schedule(cfg: ModelConfig) -> list[int]:
    return [0 if j % 2 == 0 else cfg.window_size // 2 for j in range(cfg.habs_per_rhag)]


# --- blocks ------------------------------------------------------------------


def hab_forward(x: Tensor, p: HABParams, cfg: ModelConfig, shift: int) -> Tensor:
    """Hybrid attention block on ``(N, H, W, C)`` tokens.

    ``X_M = (S)W-MSA(LN(X)) + alpha * CAB(LN(X)) + X``, then an MLP residual.
    """
    if x.ndim != 4 or x.shape[-1] != cfg.embed_dim:
        raise DimensionError(f"hab: expected (N, H, W, {cfg.embed_dim}) tokens, got {x.shape}")
    xn = layer_norm(x, p.norm1)
    branch = wmsa(xn, p.attn, cfg.window_size, cfg.num_heads, shift)
    if p.cab is not None:
        branch = T.add(branch, T.scale(cab_forward_nhwc(xn, p.cab), cfg.alpha))
    xm = T.add(branch, x)
    return T.add(mlp(layer_norm(xm, p.norm2), p.mlp), xm)


def swin_block_forward(x: Tensor, p: HABParams, cfg: ModelConfig, shift: int) -> Tensor:
    """Standard Swin block using the attention/MLP weights of ``p`` (CAB ignored)."""
    xm = T.add(wmsa(layer_norm(x, p.norm1), p.attn, cfg.window_size, cfg.num_heads, shift), x)
    return T.add(mlp(layer_norm(xm, p.norm2), p.mlp), xm)


def ocab_forward(x: Tensor, p: OCABParams, cfg: ModelConfig) -> Tensor:
    if x.ndim != 4 or x.shape[-1] != cfg.embed_dim:
        raise DimensionError(f"ocab: expected (N, H, W, {cfg.embed_dim}) tokens, got {x.shape}")
    xm = T.add(oca(layer_norm(x, p.norm1), p.attn, cfg.window_size, cfg.oca_gamma, cfg.num_heads), x)
    return T.add(mlp(layer_norm(xm, p.norm2), p.mlp), xm)


def rhag_forward(x: Tensor, p: RHAGParams, cfg: ModelConfig) -> Tensor:
    h = x
    for blk, shift in zip(p.blocks, shift_schedule(cfg)):
        h = hab_forward(h, blk, cfg, shift)
    if p.ocab is not None:
        h = ocab_forward(h, p.ocab, cfg)
    return T.add(conv2d_nhwc(h, p.conv), x)


# --- network -----------------------------------------------------------------


class HAT:
    """Shallow conv, residual hybrid attention groups, and a pixel-shuffle head.

    Parameters live in :attr:`params`, a :class:`ParamTree` whose tensors are
    shared with the structured fields used by :meth:`forward`.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params = ParamTree()
        reg = _Registry(self.params)
        rng = np.random.default_rng(seed)
        c = cfg.embed_dim
        table_len = (2 * cfg.window_size - 1) ** 2

        self.conv_first = reg.add("conv_first", init_conv(rng, cfg.in_channels, c, 3))
        self.embed_norm = reg.add("embed_norm", init_layer_norm(c))
        self.groups: list[RHAGParams] = []
        for i in range(cfg.num_rhag):
            blocks = []
            for j in range(cfg.habs_per_rhag):
                prefix = f"groups.{i}.blocks.{j}"
                blk = HABParams(
                    norm1=init_layer_norm(c),
                    attn=init_attention(rng, c, cfg.num_heads, table_len),
                    cab=(init_cab(rng, c, cfg.cab_beta, cfg.ca_reduction, cfg.cab_depthwise)
                         if cfg.enable_cab else None),
                    norm2=init_layer_norm(c),
                    mlp=init_mlp(rng, c, cfg.mlp_ratio),
                )
                reg.add(prefix, blk)
                blocks.append(blk)
            ocab = None
            if cfg.enable_ocab:
                mo, _ = overlap_size(cfg.window_size, cfg.oca_gamma)
                ocab = reg.add(f"groups.{i}.ocab", OCABParams(
                    norm1=init_layer_norm(c),
                    attn=init_attention(rng, c, cfg.num_heads, (cfg.window_size + mo - 1) ** 2),
                    norm2=init_layer_norm(c),
                    mlp=init_mlp(rng, c, cfg.mlp_ratio),
                ))
            conv = reg.add(f"groups.{i}.conv", init_conv(rng, c, c, 3))
            self.groups.append(RHAGParams(blocks, ocab, conv))
        self.norm = reg.add("norm", init_layer_norm(c))
        self.conv_after_body = reg.add("conv_after_body", init_conv(rng, c, c, 3))

        f = cfg.upsample_channels
        up = UpsampleParams(conv_before=reg.add("conv_before_upsample", init_conv(rng, c, f, 3)))
        for k, r in enumerate(upsample_factors(cfg.scale)):
            up.stages.append(reg.add(f"upsample.x{cfg.scale}.{k}", init_conv(rng, f, f * r * r, 3)))
            up.factors.append(r)
        up.conv_last = reg.add("conv_last", init_conv(rng, f, cfg.in_channels, 3))
        self.upsample = up

    # parameters whose names depend on the scale; see upsample_factors
    def upsampler_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("upsample.")]

    def forward_features(self, img: Tensor, stop_after_group: int | None = None) -> Tensor:
        """Shallow + deep features ``F0 + F_DF`` as NHWC, or the output of one group."""
        x = T.permute(img, (0, 2, 3, 1))
        f0 = conv2d_nhwc(x, self.conv_first)
        h = layer_norm(f0, self.embed_norm)
        for i, grp in enumerate(self.groups, start=1):
            h = rhag_forward(h, grp, self.cfg)
            if stop_after_group == i:
                return h
        h = layer_norm(h, self.norm)
        return T.add(conv2d_nhwc(h, self.conv_after_body), f0)

    def forward(self, img: Tensor) -> Tensor:
        """``(N, 3, h, w)`` LR image to ``(N, 3, h*s, w*s)`` SR image."""
        if img.ndim != 4 or img.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"expected (N, {self.cfg.in_channels}, h, w) input, got {img.shape}")
        feat = self.forward_features(img)
        up = self.upsample
        h = T.leaky_relu(conv2d_nhwc(feat, up.conv_before), 0.01)
        for conv, r in zip(up.stages, up.factors):
            h = pixel_shuffle_nhwc(conv2d_nhwc(h, conv), r)
        out = conv2d_nhwc(h, up.conv_last)
        return T.permute(out, (0, 3, 1, 2))

    __call__ = forward

    def num_params(self) -> int:
        return self.params.num_scalars()

    def astype(self, dtype) -> "HAT":
        """Cast all parameters in place (e.g. to float64 for gradient checks)."""
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self


def hat_forward(img: Tensor, model: HAT) -> Tensor:
    return model.forward(img)
