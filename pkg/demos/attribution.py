"""
Where does an SR patch look?
============================

Integrated gradients from a blurred copy of the LR image to the image itself,
for an 8x8 SR patch on the step edge of the first synthetic image.  Uses
``runs/toy/final.ckpt`` from ``toy_overfit.py`` when it exists, otherwise
an untrained network.  Writes ``runs/toy/lam.png`` and ``runs/toy/lam.lamp``.
"""

import os

import numpy as np

from hatsr import tensor as T
from hatsr.attribution import diffusion_index, heatmap, lam_attribute, write_lamp
from hatsr.io import load_checkpoint, save_image
from hatsr.model import HAT
from hatsr.toy import synthetic_dataset, toy_model_config

ckpt = "runs/toy/final.ckpt"
model = HAT(toy_model_config(), seed=0)
if os.path.isfile(ckpt):
    load_checkpoint(ckpt, into=model.params)
    print(f"loaded {ckpt}")
else:
    print("no trained checkpoint, attributing an untrained network")
os.makedirs("runs/toy", exist_ok=True)

data = synthetic_dataset()
lr_img, hr_img = data.lr[0], data.hr[0]
edge = int(np.argmax(np.abs(np.diff(hr_img.mean(axis=(0, 1))))))
patch = (max(edge - 3, 0), 28, 8, 8)
print(f"edge at HR column {edge}, patch {patch}")

# completeness: the signed attributions add up to the change of the target
# along the path, up to the quadrature error of the path integral
with T.precision("float64"):
    model.astype(np.float64)
    for steps in (8, 16, 32):
        amap = lam_attribute(model, lr_img, patch, steps=steps)
        print(f"{steps:3d} steps: completeness error {amap.completeness_error:.4f}, DI {amap.di:.2f}")

# how much of the saliency sits within one window of the patch footprint
x, y, w, h = patch
s = model.cfg.scale
m = model.cfg.window_size
near = np.zeros_like(amap.saliency, dtype=bool)
near[max(y // s - m, 0):(y + h) // s + m, max(x // s - m, 0):(x + w) // s + m] = True
print(f"saliency within one window of the patch: {amap.saliency[near].sum() / amap.saliency.sum():.1%}")

# a spread-out map scores high, a single hot pixel scores 100 / n
print(f"DI of a uniform map {diffusion_index(np.ones((32, 32))):.1f}, "
      f"of the map above {amap.di:.2f}")
save_image(heatmap(amap.saliency, lr_img), "runs/toy/lam.png")
write_lamp("runs/toy/lam.lamp", amap.saliency)
