"""Fast numerical self-checks behind ``hatsr selftest``."""
from __future__ import annotations

import numpy as np

from . import tensor as T


def _grad_checks() -> float:
    from .attention import init_attention, oca, overlap_relative_position_index, overlap_size, wmsa
    from .layers import conv2d_nhwc, init_conv, init_layer_norm, layer_norm

    rng = np.random.default_rng(0)
    worst = 0.0
    with T.precision("float64"):
        x = T.Tensor(rng.standard_normal((1, 6, 6, 4)), requires_grad=True)
        probe = T.Tensor(rng.standard_normal((1, 6, 6, 4)))
        conv = init_conv(rng, 4, 4, 3)
        ln = init_layer_norm(4)
        ln.gamma.data = rng.uniform(0.5, 1.5, 4)
        worst = max(worst, T.grad_check(lambda t: T.sum_all(T.mul(conv2d_nhwc(t, conv), probe)), x))
        worst = max(worst, T.grad_check(lambda t: T.sum_all(T.mul(layer_norm(t, ln), probe)), x))
        xa = T.Tensor(rng.standard_normal((1, 8, 8, 4)), requires_grad=True)
        pa = T.Tensor(rng.standard_normal((1, 8, 8, 4)))
        p = init_attention(rng, 4, 2, 7 * 7)
        p.bias_table.data = rng.standard_normal(p.bias_table.shape) * 0.5
        worst = max(worst, T.grad_check(lambda t: T.sum_all(T.mul(wmsa(t, p, 4, 2, 2), pa)), xa))
        mo, _ = overlap_size(4, 0.5)
        po = init_attention(rng, 4, 2, overlap_relative_position_index(4, mo).max() + 1)
        worst = max(worst, T.grad_check(lambda t: T.sum_all(T.mul(oca(t, po, 4, 0.5, 2), pa)), xa))
    return worst


def _checkpoint_roundtrip() -> bool:
    from .io import decode_checkpoint, encode_checkpoint

    rng = np.random.default_rng(1)
    entries = {"a.weight": rng.standard_normal((3, 2, 2)).astype(np.float32),
               "b": np.asarray(2.5, dtype=np.float32)}
    back = decode_checkpoint(encode_checkpoint(entries))
    return all(back[k].tobytes() == v.tobytes() and back[k].shape == v.shape for k, v in entries.items())


def _metric_endpoints() -> bool:
    from .metrics import psnr, rgb_to_y

    y0 = rgb_to_y(np.zeros((3, 2, 2)))
    y1 = rgb_to_y(np.ones((3, 2, 2)))
    a = np.full((4, 4), 100.0)
    return bool((y0 == 16).all() and (y1 == 235).all() and psnr(a, a) == float("inf")
                and abs(psnr(a, a + 255.0)) < 1e-12)


def _complexity_row() -> bool:
    from .complexity import complexity_report
    from .model import ModelConfig

    rep = complexity_report(ModelConfig(), 64, 64)
    return abs(rep.params / 1e6 - 20.8) / 20.8 < 0.05 and abs(rep.multiply_adds / 1e9 - 103.7) / 103.7 < 0.10


def run_selftest(emit=print) -> bool:
    results = []
    g = _grad_checks()
    results.append(("gradient checks (conv, layer norm, W-MSA, OCA)", g < 1e-4, f"max rel err {g:.2e}"))
    results.append(("checkpoint byte round trip", _checkpoint_roundtrip(), ""))
    results.append(("Y endpoints and PSNR sentinels", _metric_endpoints(), ""))
    results.append(("default model complexity", _complexity_row(), ""))
    for name, ok, detail in results:
        emit(f"{'PASS' if ok else 'FAIL'}\t{name}\t{detail}".rstrip())
    return all(ok for _, ok, _ in results)
