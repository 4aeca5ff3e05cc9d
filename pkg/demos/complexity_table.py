"""
Parameter and multiply-add budget of the ablation variants
==========================================================

Counts come from closed-form formulas over the configuration, so they are
available without building a network.  Multiply-adds are for a 64x64 LR input
to the x4 model.
"""

from hatsr.complexity import appendix_table, complexity_report
from hatsr.model import ModelConfig

# every ablation row next to the published value
print(f"{'variant':<20}{'params':>9}{'ref':>8}{'MACs':>10}{'ref':>8}")
for row in appendix_table():
    print(f"{row['label']:<20}{row['params_m']:>8.2f}M{row['ref_params_m']:>7.1f}M"
          f"{row['macs_g']:>9.2f}G{row['ref_macs_g']:>7.1f}G")

# the per-module breakdown of the full network shows where the cost goes:
# the six residual groups dominate, the head is a few percent
rep = complexity_report(ModelConfig(scale=4))
groups = sum(r.macs for r in rep.rows if r.name.startswith("groups."))
print(f"\nresidual groups carry {groups / rep.multiply_adds:.1%} of {rep.multiply_adds / 1e9:.1f}G multiply-adds")

# doubling the depth doubles the body but not the head
deep = complexity_report(ModelConfig(scale=4, num_rhag=12))
print(f"12 groups: {deep.params / 1e6:.2f}M params, {deep.multiply_adds / 1e9:.1f}G multiply-adds")
