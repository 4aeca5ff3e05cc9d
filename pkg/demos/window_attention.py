"""
Shifted windows and overlapping windows
=======================================

Shows the region labels that build the shifted-window mask, the key window
size of the overlapping cross-attention, and checks both kernels against
the explicit formulas on a tiny input.
"""

import numpy as np

from hatsr import tensor as T
from hatsr.attention import WindowGrid, init_attention, oca, overlap_size, region_labels, wmsa
from hatsr.tensor import Tensor

# an 8x8 map with 4x4 windows shifted by 2: after the roll, the bottom and
# right strips hold pixels that were not neighbours, so they get distinct labels
grid = WindowGrid(4, 2, 8, 8)
print("region labels after the cyclic shift:")
print(region_labels(grid))

# overlapping windows: queries from MxM windows, keys from (1 + 2 gamma) M
for m, gamma in ((16, 0.5), (8, 0.25), (4, 0.5)):
    mo, pad = overlap_size(m, gamma)
    print(f"M={m:2d} gamma={gamma}: key window {mo}x{mo}, {pad} px on each side, "
          f"{(m + mo - 1) ** 2} relative offsets")

# one attention layer on random tokens; each query row of the attention
# matrix is a distribution over its key window
rng = np.random.default_rng(0)
with T.precision("float64"):
    p = init_attention(rng, 4, 2, (4 + 8 - 1) ** 2)
    x = Tensor(rng.standard_normal((1, 8, 8, 4)))
    out, attn = oca(x, p, 4, 0.5, 2, return_attn=True)
print(f"\nOCA attention {attn.shape}: rows sum to {attn.data.sum(-1).min():.6f}..{attn.data.sum(-1).max():.6f}")

# gamma = 0 collapses the key window onto the query window
with T.precision("float64"):
    p0 = init_attention(rng, 4, 2, 49)
    same = np.abs(oca(x, p0, 4, 0.0, 2).data - wmsa(x, p0, 4, 2, 0).data).max()
print(f"gamma=0 overlapping attention vs plain window attention: max diff {same:.1e}")
