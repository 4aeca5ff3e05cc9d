"""Closed-form parameter and Multiply-Add counts for a :class:`ModelConfig`.

Counting conventions
--------------------
* convolution: ``k*k*Cin*Cout*Hout*Wout``
* linear over ``T`` tokens: ``T*in*out``
* attention, per window and head: ``Tq*Tk*d`` for ``QK^T`` plus ``Tq*Tk*d`` for ``AV``
* layer norm, softmax, activations, pooling, residual adds and the bias
  additions are not counted
* the upsampler (including the final 3-channel conv) is counted at the output
  resolution of each stage

The counts never look at a constructed network, so they serve as an
independent check of :class:`hatsr.model.HAT`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .attention import overlap_size
from .layers import ca_width, cab_width, mlp_hidden
from .model import ModelConfig, upsample_factors


@dataclass
class Row:
    name: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    input_h: int
    input_w: int
    rows: list[Row] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def multiply_adds(self) -> int:
        return sum(r.macs for r in self.rows)

    def add(self, name: str, params: int, macs: int) -> None:
        self.rows.append(Row(name, int(params), int(macs)))

    def to_text(self) -> str:
        lines = [
            f"# multiply-adds at input {self.input_h}x{self.input_w}; conv k*k*Cin*Cout*H*W, "
            "linear T*in*out, attention 2*Tq*Tk*d per head; norms/activations excluded",
            "module\tparams\tmulti_adds",
        ]
        lines += [f"{r.name}\t{r.params}\t{r.macs}" for r in self.rows]
        lines.append(f"total\t{self.params}\t{self.multiply_adds}")
        lines.append(f"total_human\t{self.params / 1e6:.2f}M\t{self.multiply_adds / 1e9:.2f}G")
        return "\n".join(lines)

    def to_records(self) -> list[str]:
        """One ``key=value`` line per module row, JSON-encoded values."""
        return [f"module={json.dumps(r.name)} params={r.params} macs={r.macs}" for r in self.rows]


def _conv(cin: int, cout: int, k: int, hw: int) -> tuple[int, int]:
    return k * k * cin * cout + cout, k * k * cin * cout * hw


def _dw_separable(cin: int, cout: int, k: int, hw: int) -> tuple[int, int]:
    # depthwise k x k on cin channels, then pointwise cin -> cout
    dw_p, dw_m = k * k * cin + cin, k * k * cin * hw
    pw_p, pw_m = _conv(cin, cout, 1, hw)
    return dw_p + pw_p, dw_m + pw_m


def _linear(fin: int, fout: int, tokens: int) -> tuple[int, int]:
    return fin * fout + fout, tokens * fin * fout


def _mlp(c: int, ratio: float, tokens: int) -> tuple[int, int]:
    hidden = mlp_hidden(c, ratio)
    a = _linear(c, hidden, tokens)
    b = _linear(hidden, c, tokens)
    return a[0] + b[0], a[1] + b[1]


def _padded(n: int, m: int) -> int:
    return math.ceil(n / m) * m


def cab_counts(cfg: ModelConfig, h: int, w: int) -> tuple[int, int]:
    c, hw = cfg.embed_dim, h * w
    mid = cab_width(c, cfg.cab_beta)
    squeeze = ca_width(c, cfg.ca_reduction)
    conv = _dw_separable if cfg.cab_depthwise else _conv
    c1 = conv(c, mid, 3, hw)
    c2 = conv(mid, c, 3, hw)
    down = _conv(c, squeeze, 1, 1)
    up = _conv(squeeze, c, 1, 1)
    return c1[0] + c2[0] + down[0] + up[0], c1[1] + c2[1] + down[1] + up[1]


def _attention_counts(cfg: ModelConfig, h: int, w: int, key_window: int, table_len: int) -> tuple[int, int]:
    c, m = cfg.embed_dim, cfg.window_size
    hp, wp = _padded(h, m), _padded(w, m)
    tokens = hp * wp
    qkv = _linear(c, 3 * c, tokens)
    proj = _linear(c, c, tokens)
    windows = tokens // (m * m)
    attn_macs = 2 * windows * (m * m) * (key_window ** 2) * c  # heads * d == c
    return qkv[0] + proj[0] + cfg.num_heads * table_len, qkv[1] + proj[1] + attn_macs


def hab_counts(cfg: ModelConfig, h: int, w: int) -> tuple[int, int]:
    c, m = cfg.embed_dim, cfg.window_size
    attn = _attention_counts(cfg, h, w, m, (2 * m - 1) ** 2)
    mlp = _mlp(c, cfg.mlp_ratio, h * w)
    params = attn[0] + mlp[0] + 4 * c  # two layer norms
    macs = attn[1] + mlp[1]
    if cfg.enable_cab:
        cab = cab_counts(cfg, h, w)
        params += cab[0]
        macs += cab[1]
    return params, macs


def ocab_counts(cfg: ModelConfig, h: int, w: int) -> tuple[int, int]:
    c, m = cfg.embed_dim, cfg.window_size
    mo, _ = overlap_size(m, cfg.oca_gamma)
    attn = _attention_counts(cfg, h, w, mo, (m + mo - 1) ** 2)
    mlp = _mlp(c, cfg.mlp_ratio, h * w)
    return attn[0] + mlp[0] + 4 * c, attn[1] + mlp[1]


def complexity_report(cfg: ModelConfig, input_h: int = 64, input_w: int = 64) -> ComplexityReport:
    cfg.validate()
    h, w, c = input_h, input_w, cfg.embed_dim
    hw = h * w
    rep = ComplexityReport(h, w)
    rep.add("conv_first", *_conv(cfg.in_channels, c, 3, hw))
    rep.add("embed_norm", 2 * c, 0)
    for i in range(cfg.num_rhag):
        hab = hab_counts(cfg, h, w)
        rep.add(f"groups.{i}.habs", hab[0] * cfg.habs_per_rhag, hab[1] * cfg.habs_per_rhag)
        if cfg.enable_ocab:
            rep.add(f"groups.{i}.ocab", *ocab_counts(cfg, h, w))
        rep.add(f"groups.{i}.conv", *_conv(c, c, 3, hw))
    rep.add("norm", 2 * c, 0)
    rep.add("conv_after_body", *_conv(c, c, 3, hw))
    f = cfg.upsample_channels
    rep.add("conv_before_upsample", *_conv(c, f, 3, hw))
    up_p = up_m = 0
    cur = hw
    for r in upsample_factors(cfg.scale):
        p, m_ = _conv(f, f * r * r, 3, cur)
        up_p, up_m = up_p + p, up_m + m_
        cur *= r * r
    rep.add("upsample", up_p, up_m)
    rep.add("conv_last", *_conv(f, cfg.in_channels, 3, cur))
    return rep


def count_params(cfg: ModelConfig) -> int:
    return complexity_report(cfg).params


def count_macs(cfg: ModelConfig, input_h: int = 64, input_w: int = 64) -> int:
    return complexity_report(cfg, input_h, input_w).multiply_adds


# Appendix rows: (label, config overrides, params in millions, multiply-adds in G).
# Base config is the x4 network with both CAB and OCAB disabled.
APPENDIX_ROWS = [
    ("window 8 baseline", dict(window_size=8, enable_cab=False, enable_ocab=False), 11.9, 53.6),
    ("window 16 baseline", dict(enable_cab=False, enable_ocab=False), 12.1, 63.8),
    ("baseline w/ OCAB", dict(enable_cab=False), 13.7, 74.7),
    ("baseline w/ CAB", dict(enable_ocab=False), 19.2, 92.8),
    ("HAT", dict(), 20.8, 103.7),
    ("CAB beta=1", dict(enable_ocab=False, cab_beta=1), 33.2, 150.1),
    ("CAB beta=2", dict(enable_ocab=False, cab_beta=2), 22.7, 107.1),
    ("CAB beta=6", dict(enable_ocab=False, cab_beta=6), 15.7, 78.5),
]


def appendix_table(base: ModelConfig | None = None) -> list[dict]:
    """Counts for every appendix configuration next to the published values."""
    base = base or ModelConfig(scale=4)
    out = []
    for label, overrides, ref_p, ref_m in APPENDIX_ROWS:
        cfg = base.replace(**overrides)
        rep = complexity_report(cfg, 64, 64)
        out.append(dict(label=label, params_m=rep.params / 1e6, macs_g=rep.multiply_adds / 1e9,
                        ref_params_m=ref_p, ref_macs_g=ref_m))
    return out
