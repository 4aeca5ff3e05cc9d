"""Randomized gradient-check cases, one builder per differentiable layer.

Each builder takes a generator, draws a small random shape and random
weights, and returns ``(f, x, indices)`` for :func:`hatsr.tensor.grad_check`.
Every ``f`` contracts the layer output with a fixed random probe so that all
output components contribute.  Builders must be called inside a float64
precision context.
"""
from __future__ import annotations

import numpy as np

from hatsr import tensor as T
from hatsr.attention import init_attention, oca, overlap_size, wmsa
from hatsr.layers import (
    Conv2dParams, LayerNormParams, cab_forward, channel_attention, conv2d, depthwise_conv2d_nhwc, init_cab,
    init_depthwise, init_mlp, layer_norm, linear, init_linear, mlp, pixel_shuffle,
)
from hatsr.model import HAT, hab_forward, ocab_forward
from hatsr.tensor import Tensor

from conftest import tiny_config

MAX_PROBES = 48


def _contract(fn, out_shape, rng):
    probe = Tensor(rng.standard_normal(out_shape))
    return lambda t: T.sum_all(T.mul(fn(t), probe))


def _probe_indices(x, rng):
    if x.size <= MAX_PROBES:
        return None
    return rng.choice(x.size, MAX_PROBES, replace=False).tolist()


def _case(fn, x, rng):
    out = fn(Tensor(x)).shape
    return _contract(fn, out, rng), x, _probe_indices(x, rng)


def conv_input(rng):
    cin, cout, k = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    w = Tensor(rng.standard_normal((cout, cin, k, k)) * 0.5)
    b = Tensor(rng.standard_normal(cout))
    p = Conv2dParams(w, b, stride, k // 2)
    x = rng.standard_normal((1, cin, int(rng.integers(3, 7)), int(rng.integers(3, 7))))
    return _case(lambda t: conv2d(t, p), x, rng)


def conv_weight(rng):
    cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    x = Tensor(rng.standard_normal((2, cin, 5, 4)))
    b = Tensor(rng.standard_normal(cout))
    w = rng.standard_normal((cout, cin, 3, 3)) * 0.5
    return _case(lambda t: conv2d(x, Conv2dParams(t, b, 1, 1)), w, rng)


def depthwise(rng):
    c = int(rng.integers(1, 6))
    p = init_depthwise(rng, c, 3)
    p.bias.data = rng.standard_normal(c)
    x = rng.standard_normal((1, int(rng.integers(3, 7)), int(rng.integers(3, 7)), c))
    return _case(lambda t: depthwise_conv2d_nhwc(t, p), x, rng)


def layernorm(rng):
    c = int(rng.integers(2, 9))
    p = LayerNormParams(Tensor(rng.uniform(0.5, 1.5, c)), Tensor(rng.standard_normal(c)), 1e-5)
    x = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(1, 5)), c)) * 2
    return _case(lambda t: layer_norm(t, p), x, rng)


def linear_layer(rng):
    fin, fout = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    p = init_linear(rng, fin, fout)
    p.weight.data = rng.standard_normal((fout, fin))
    p.bias.data = rng.standard_normal(fout)
    x = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(1, 4)), fin))
    return _case(lambda t: linear(t, p), x, rng)


def mlp_layer(rng):
    c = int(rng.integers(2, 7))
    p = init_mlp(rng, c, 2.0)
    p.fc1.weight.data = rng.standard_normal(p.fc1.weight.shape)
    p.fc2.weight.data = rng.standard_normal(p.fc2.weight.shape) * 0.5
    x = rng.standard_normal((1, int(rng.integers(1, 5)), c))
    return _case(lambda t: mlp(t, p), x, rng)


def _cab_params(rng, depthwise=False):
    beta = int(rng.choice([1, 2]))
    c = 4 * beta * int(rng.integers(1, 3))
    p = init_cab(rng, c, beta, 4, depthwise=depthwise)
    for conv in (p.conv1, p.conv2, p.ca_down, p.ca_up, p.dw1, p.dw2):
        if conv is not None:
            conv.bias.data = rng.standard_normal(conv.bias.shape) * 0.2
    return p, c


def channel_attn(rng):
    p, c = _cab_params(rng)
    x = rng.standard_normal((1, c, int(rng.integers(2, 5)), int(rng.integers(2, 5))))
    return _case(lambda t: channel_attention(t, p), x, rng)


def cab(rng):
    p, c = _cab_params(rng, depthwise=bool(rng.integers(0, 2)))
    x = rng.standard_normal((1, c, int(rng.integers(3, 6)), int(rng.integers(3, 6))))
    return _case(lambda t: cab_forward(t, p), x, rng)


def shuffle(rng):
    r = int(rng.choice([2, 3]))
    c = int(rng.integers(1, 3))
    x = rng.standard_normal((1, c * r * r, int(rng.integers(1, 4)), int(rng.integers(1, 4))))
    return _case(lambda t: pixel_shuffle(t, r), x, rng)


def activations(rng):
    x = rng.standard_normal((int(rng.integers(2, 6)), int(rng.integers(2, 6))))
    x[np.abs(x) < 0.05] += 0.2
    return _case(lambda t: T.add(T.gelu(t), T.add(T.sigmoid(t), T.leaky_relu(t))), x, rng)


def softmax(rng):
    x = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(2, 8)))) * 2
    return _case(T.softmax_lastdim, x, rng)


def _attn_params(rng, c, heads, table_len):
    p = init_attention(rng, c, heads, table_len)
    p.qkv.weight.data = rng.standard_normal(p.qkv.weight.shape) * 0.4
    p.qkv.bias.data = rng.standard_normal(p.qkv.bias.shape) * 0.1
    p.proj.weight.data = rng.standard_normal(p.proj.weight.shape) * 0.4
    p.bias_table.data = rng.standard_normal(p.bias_table.shape) * 0.5
    return p


def _attn_shape(rng):
    m = int(rng.choice([2, 4]))
    heads = int(rng.choice([1, 2]))
    c = heads * int(rng.integers(1, 3))
    h, w = int(rng.integers(m, 2 * m + 2)), int(rng.integers(m, 2 * m + 2))
    return m, heads, c, h, w


def wmsa_plain(rng):
    m, heads, c, h, w = _attn_shape(rng)
    p = _attn_params(rng, c, heads, (2 * m - 1) ** 2)
    return _case(lambda t: wmsa(t, p, m, heads, 0), rng.standard_normal((1, h, w, c)), rng)


def wmsa_shifted(rng):
    m, heads, c, h, w = _attn_shape(rng)
    p = _attn_params(rng, c, heads, (2 * m - 1) ** 2)
    return _case(lambda t: wmsa(t, p, m, heads, m // 2), rng.standard_normal((1, h, w, c)), rng)


def wmsa_table(rng):
    m, heads, c, h, w = _attn_shape(rng)
    p = _attn_params(rng, c, heads, (2 * m - 1) ** 2)
    x = Tensor(rng.standard_normal((1, h, w, c)))

    def via(t):
        p.bias_table = t
        return wmsa(x, p, m, heads, m // 2)

    return _case(via, p.bias_table.data.copy(), rng)


def oca_kernel(rng):
    m, heads, c, h, w = _attn_shape(rng)
    gamma = 0.5
    mo, _ = overlap_size(m, gamma)
    p = _attn_params(rng, c, heads, (m + mo - 1) ** 2)
    return _case(lambda t: oca(t, p, m, gamma, heads), rng.standard_normal((1, h, w, c)), rng)


def oca_table(rng):
    m, heads, c, h, w = _attn_shape(rng)
    mo, _ = overlap_size(m, 0.5)
    p = _attn_params(rng, c, heads, (m + mo - 1) ** 2)
    x = Tensor(rng.standard_normal((1, h, w, c)))

    def via(t):
        p.bias_table = t
        return oca(x, p, m, 0.5, heads)

    return _case(via, p.bias_table.data.copy(), rng)


def _block_model(rng):
    cfg = tiny_config(alpha=float(rng.uniform(0.01, 1.0)))
    m = HAT(cfg, seed=int(rng.integers(0, 2**31))).astype(np.float64)
    for t in m.params.values():
        t.data = rng.standard_normal(t.shape) * 0.3
    return m, cfg


def hab(rng):
    m, cfg = _block_model(rng)
    shift = int(rng.choice([0, cfg.window_size // 2]))
    x = rng.standard_normal((1, 4 * int(rng.integers(1, 3)), 5, cfg.embed_dim))
    return _case(lambda t: hab_forward(t, m.groups[0].blocks[0], cfg, shift), x, rng)


def ocab(rng):
    m, cfg = _block_model(rng)
    x = rng.standard_normal((1, 6, 4, cfg.embed_dim))
    return _case(lambda t: ocab_forward(t, m.groups[0].ocab, cfg), x, rng)


CASES = {f.__name__: f for f in (
    conv_input, conv_weight, depthwise, layernorm, linear_layer, mlp_layer, channel_attn, cab, shuffle,
    activations, softmax, wmsa_plain, wmsa_shifted, wmsa_table, oca_kernel, oca_table, hab, ocab,
)}


def run_case(name: str, seed: int) -> float:
    rng = np.random.default_rng([seed, len(name)] + [ord(ch) for ch in name])
    with T.precision("float64"):
        f, x, idx = CASES[name](rng)
        return T.grad_check(f, x, indices=idx)
