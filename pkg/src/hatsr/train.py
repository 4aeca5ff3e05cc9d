"""L1 training with Adam, step learning-rate schedule, patch sampling and the
pre-train / fine-tune workflow."""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NonFiniteError, UsageError
from .model import HAT, ParamTree
from .resize import bicubic_resize
from .tensor import Tensor

log = logging.getLogger(__name__)

PHASES = ("scratch", "pretrain", "finetune")

# reference schedules: (total iterations, halving points, base learning rate)
PAPER_SCHEDULES = {
    "scratch": (500_000, (250_000, 400_000, 450_000, 475_000), 2e-4),
    "pretrain": (800_000, (300_000, 500_000, 650_000, 700_000, 750_000), 2e-4),
    "finetune": (250_000, (125_000, 200_000, 230_000, 240_000), 1e-5),
}


def scaled_milestones(phase: str, total_iters: int) -> list[int]:
    """Reference halving points for ``phase``, rescaled to ``total_iters``."""
    ref_total, points, _ = PAPER_SCHEDULES[phase]
    out = []
    for p in points:
        m = int(round(p * total_iters / ref_total))
        if 0 < m < total_iters and (not out or m > out[-1]):
            out.append(m)
    return out


@dataclass
class TrainConfig:
    batch_size: int = 32
    patch_size: int = 64
    total_iters: int = 500_000
    base_lr: float | None = None
    milestones: list[int] | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    seed: int = 0
    phase: str = "scratch"
    init_checkpoint: str | None = None
    augment: bool = True
    grad_clip: float | None = None
    log_every: int = 100

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.base_lr is None:
            self.base_lr = PAPER_SCHEDULES[self.phase][2]
        if self.milestones is None:
            self.milestones = scaled_milestones(self.phase, self.total_iters)
        self.milestones = [int(m) for m in self.milestones]
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1 or self.patch_size < 1 or self.total_iters < 1:
            raise ConfigError("batch_size, patch_size and total_iters must be >= 1")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.total_iters or m < 0 for m in ms):
            raise ConfigError(f"milestones {ms} must be strictly increasing and below total_iters")
        if self.phase == "finetune" and not self.init_checkpoint:
            raise ConfigError("phase 'finetune' requires init_checkpoint")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be non-negative")

    def replace(self, **changes) -> "TrainConfig":
        d = dataclasses.asdict(self)
        d.update(changes)
        if "total_iters" in changes and "milestones" not in changes:
            d["milestones"] = None
        return TrainConfig(**d)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """``base_lr`` halved once for every milestone already reached."""
    passed = sum(1 for m in cfg.milestones if iteration >= m)
    return cfg.base_lr * 0.5 ** passed


# --- loss / optimizer --------------------------------------------------------


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at exact ties is 0."""
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=pred.dtype)

    def vjp(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return T.apply_op(out, (pred, target), vjp, "l1_loss")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def carried_adam(state: AdamState | None, names: Iterable[str]) -> AdamState | None:
    """Optimizer state to continue from after loading ``names`` from a checkpoint.

    Moments are kept only for the loaded tensors; reinitialized ones start
    from zero.  Restarting Adam from zero moments on a converged network
    moves every weight by about ``lr`` on the first step, which is enough to
    undo part of the fit even at the fine-tuning learning rate.
    """
    if state is None:
        return None
    keep = [k for k in names if k in state.m]
    return AdamState({k: state.m[k].copy() for k in keep}, {k: state.v[k].copy() for k in keep}, state.step)


def adam_step(params: ParamTree, grads: dict[str, np.ndarray] | None, state: AdamState,
              lr: float, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place.

    ``grads`` defaults to each parameter's ``.grad`` (missing ones count as 0).
    """
    if grads is None:
        grads = {k: t.grad for k, t in params.items() if t.grad is not None}
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    state.step += 1
    t = state.step
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data = (p.data - lr * (mhat / (np.sqrt(vhat) + eps))).astype(p.dtype, copy=False)


def clip_grad_norm(params: ParamTree, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((t.grad.astype(np.float64) ** 2).sum())
                          for t in params.values() if t.grad is not None)))
    if total > max_norm:
        f = max_norm / (total + 1e-12)
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * f
    return total


# --- data --------------------------------------------------------------------


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic (MATLAB-style, antialiased) downscaling of a ``(C, H, W)`` image."""
    return bicubic_resize(hr, 1.0 / scale, antialias=True)


def mod_crop(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[-2:]
    return img[..., : h - h % scale, : w - w % scale]


class PairedDataset:
    """HR images in ``[0, 1]`` with their bicubic LR counterparts."""

    def __init__(self, hr_images: Sequence[np.ndarray], scale: int, lr_images: Sequence[np.ndarray] | None = None):
        self.scale = scale
        self.hr = [np.ascontiguousarray(mod_crop(np.asarray(h, dtype=np.float64), scale)) for h in hr_images]
        if lr_images is None:
            self.lr = [degrade(h, scale) for h in self.hr]
        else:
            self.lr = [np.asarray(x, dtype=np.float64) for x in lr_images]
        for lr, hr in zip(self.lr, self.hr):
            if lr.shape[-2] * scale != hr.shape[-2] or lr.shape[-1] * scale != hr.shape[-1]:
                raise DimensionError(f"LR {lr.shape} and HR {hr.shape} are not x{scale} aligned")

    def __len__(self) -> int:
        return len(self.hr)


def augment_pair(lr: np.ndarray, hr: np.ndarray, k: int, flip: bool) -> tuple[np.ndarray, np.ndarray]:
    """Rotate both by ``k`` quarter turns, then optionally flip horizontally."""
    lr = np.rot90(lr, k, axes=(-2, -1))
    hr = np.rot90(hr, k, axes=(-2, -1))
    if flip:
        lr, hr = lr[..., ::-1], hr[..., ::-1]
    return lr, hr


def sample_batch(dataset: PairedDataset, patch: int, scale: int, rng: np.random.Generator,
                 batch_size: int = 1, augment: bool = True, return_meta: bool = False):
    """Aligned random LR/HR crops; the crop offsets obey ``hr_off = lr_off * scale``."""
    if scale != dataset.scale:
        raise UsageError(f"dataset is x{dataset.scale}, asked for x{scale}")
    usable = [i for i, lr in enumerate(dataset.lr) if lr.shape[-2] >= patch and lr.shape[-1] >= patch]
    if len(usable) < len(dataset):
        log.warning("skipping %d images smaller than the %dpx LR patch", len(dataset) - len(usable), patch)
    if not usable:
        raise UsageError(f"no image is large enough for a {patch}px LR patch")
    if batch_size <= len(usable):
        picks = rng.choice(len(usable), size=batch_size, replace=False)
    else:
        picks = rng.integers(0, len(usable), size=batch_size)
    lrs, hrs, meta = [], [], []
    hp = patch * scale
    for pi in picks:
        i = usable[int(pi)]
        lr_img, hr_img = dataset.lr[i], dataset.hr[i]
        y = int(rng.integers(0, lr_img.shape[-2] - patch + 1))
        x = int(rng.integers(0, lr_img.shape[-1] - patch + 1))
        lp = lr_img[..., y:y + patch, x:x + patch]
        hq = hr_img[..., y * scale:y * scale + hp, x * scale:x * scale + hp]
        k, flip = (int(rng.integers(0, 4)), bool(rng.integers(0, 2))) if augment else (0, False)
        lp, hq = augment_pair(lp, hq, k, flip)
        lrs.append(lp)
        hrs.append(hq)
        meta.append(dict(index=i, lr_offset=(y, x), hr_offset=(y * scale, x * scale), rot=k, flip=flip))
    dt = T.get_default_dtype()
    out = (np.stack(lrs).astype(dt), np.stack(hrs).astype(dt))
    return out + (meta,) if return_meta else out


# --- loop --------------------------------------------------------------------


class TrainingDiverged(NonFiniteError):
    """Loss or gradients became non-finite; the last good state was kept."""


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]]  # (iteration, lr, loss)
    checkpoints: list[str]
    adam: AdamState


def evaluate_l1(model: HAT, lr: np.ndarray, hr: np.ndarray) -> float:
    with T.no_record():
        return float(l1_loss(model(Tensor(lr)), Tensor(hr)).data)


def train_loop(model: HAT, data: PairedDataset, cfg: TrainConfig, out_dir: str | None = None,
               adam: AdamState | None = None, log_file=None,
               callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """sample -> forward -> L1 -> backward -> Adam, ``cfg.total_iters`` times.

    The metric log gets one ``iter<TAB>lr<TAB>loss`` line every
    ``cfg.log_every`` iterations.  With ``out_dir`` set, checkpoints are
    written at every milestone and at the end.
    """
    from .io import save_checkpoint

    cfg.validate()
    if data.scale != model.cfg.scale:
        raise ConfigError(f"dataset is x{data.scale} but model is x{model.cfg.scale}")
    rng = np.random.default_rng(cfg.seed)
    adam = adam or AdamState()
    history: list[tuple[int, float, float]] = []
    ckpts: list[str] = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    save_points = set(cfg.milestones)
    params = model.params

    for it in range(cfg.total_iters):
        lr_x, hr_x = sample_batch(data, cfg.patch_size, data.scale, rng, cfg.batch_size, cfg.augment)
        lr = lr_at(it, cfg)
        params.zero_grad()
        try:
            with T.Tape() as tape:
                loss = l1_loss(model(Tensor(lr_x)), Tensor(hr_x))
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NonFiniteError("loss is not finite")
            T.backward(loss, tape)
            if cfg.grad_clip:
                clip_grad_norm(params, cfg.grad_clip)
            adam_step(params, None, adam, lr, cfg)
        except NonFiniteError as e:
            if out_dir:
                path = os.path.join(out_dir, "last_good.ckpt")
                save_checkpoint(params, path, adam)
                ckpts.append(path)
            raise TrainingDiverged(f"iteration {it}: {e}") from e
        history.append((it, lr, loss_val))
        if callback is not None:
            callback(it, loss_val)
        if log_file is not None and (it % cfg.log_every == 0 or it == cfg.total_iters - 1):
            log_file.write(f"{it}\t{lr:.6g}\t{loss_val:.8f}\n")
            log_file.flush()
        if out_dir and (it + 1) in save_points:
            path = os.path.join(out_dir, f"iter_{it + 1:07d}.ckpt")
            save_checkpoint(params, path, adam)
            ckpts.append(path)
    if out_dir:
        path = os.path.join(out_dir, "final.ckpt")
        save_checkpoint(params, path, adam)
        ckpts.append(path)
    return TrainResult(history, ckpts, adam)
