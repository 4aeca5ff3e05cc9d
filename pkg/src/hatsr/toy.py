"""A small, fast configuration and synthetic data for overfitting experiments.

The network is small enough to memorize eight 32x32 LR patches on one CPU
core within a few minutes, which makes it useful for checking the whole
training path end to end.
"""
from __future__ import annotations

import numpy as np

from .model import ModelConfig
from .train import PairedDataset, TrainConfig, scaled_milestones


def toy_model_config(scale: int = 2) -> ModelConfig:
    return ModelConfig(embed_dim=32, num_rhag=2, habs_per_rhag=2, window_size=8, num_heads=2, cab_beta=4,
                       scale=scale, upsample_channels=16)


def synthetic_image(rng: np.random.Generator, size: int = 64, edge: bool = True) -> np.ndarray:
    """``(3, size, size)`` image in ``[0, 1]``: three random plane waves per
    channel around mid-gray, optionally with one vertical step edge."""
    y, x = np.mgrid[0:size, 0:size] / size
    out = np.zeros((3, size, size))
    for c in range(3):
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3, 2)
            ph = rng.uniform(0, 6.3)
            out[c] += np.sin(2 * np.pi * (fx * x + fy * y) + ph)
    out = 0.5 + 0.15 * out
    if edge:
        out += 0.2 * (x > rng.uniform(0.3, 0.7))
    return np.clip(out, 0, 1)


def synthetic_dataset(n: int = 8, size: int = 64, scale: int = 2, seed: int = 0) -> PairedDataset:
    rng = np.random.default_rng(seed)
    return PairedDataset([synthetic_image(rng, size) for _ in range(n)], scale)


def toy_train_config(total_iters: int = 2000, seed: int = 0, **over) -> TrainConfig:
    """Pre-training run on batches of 2 full 32px LR patches, no augmentation,
    lr 1e-3 halved at 50/80/90/95% of ``total_iters``."""
    base = dict(batch_size=2, patch_size=32, total_iters=total_iters, base_lr=1e-3, augment=False, seed=seed,
                log_every=100, phase="pretrain", milestones=scaled_milestones("scratch", total_iters))
    base.update(over)
    return TrainConfig(**base)


def stacked(data: PairedDataset) -> tuple[np.ndarray, np.ndarray]:
    """All LR and HR images as float32 batches."""
    return np.stack(data.lr).astype(np.float32), np.stack(data.hr).astype(np.float32)
