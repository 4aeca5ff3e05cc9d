"""
Memorizing eight synthetic patches
==================================

Trains the small network (32 channels, 2 residual groups of 2 blocks,
8x8 windows) on eight 32x32 LR patches for 2000 iterations.  On one CPU
core this takes around five minutes.  The final checkpoint is written to
``runs/toy/final.ckpt`` and is used by ``attribution.py``.

    python demos/toy_overfit.py [iterations]
"""

import sys
import time

from hatsr.model import HAT
from hatsr.toy import stacked, synthetic_dataset, toy_model_config, toy_train_config
from hatsr.train import evaluate_l1, train_loop

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 2000

# waves plus a step edge, degraded with the bicubic kernel to 32x32
data = synthetic_dataset()
lr, hr = stacked(data)
model = HAT(toy_model_config(), seed=0)
print(f"{model.num_params()} parameters, memorized-set L1 before training {evaluate_l1(model, lr, hr):.4f}")

cfg = toy_train_config(total_iters=iters)
print(f"lr {cfg.base_lr:g} halved at {cfg.milestones}")
t0 = time.perf_counter()


def progress(it, loss):
    if (it + 1) % 200 == 0:
        print(f"{it + 1:5d}  batch L1 {loss:.5f}  set L1 {evaluate_l1(model, lr, hr):.5f}  "
              f"{time.perf_counter() - t0:.0f}s", flush=True)


res = train_loop(model, data, cfg, out_dir="runs/toy", callback=progress)
print(f"final memorized-set L1 {evaluate_l1(model, lr, hr):.5f}; checkpoints: {', '.join(res.checkpoints)}")
