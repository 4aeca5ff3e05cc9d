"""``hatsr`` command line: train, finetune, sr, eval, lam, complexity, features, selftest.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
``HAT_THREADS`` caps BLAS worker threads; unset or 0 means one thread.
"""
from __future__ import annotations

import argparse
import math
import os
import re
import sys

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError, HatError, UsageError

IMAGE_EXTS = (".png", ".ppm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _thread_limit() -> int:
    raw = os.environ.get("HAT_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HAT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("HAT_THREADS must be >= 0")
    return n or 1


def _list_images(directory: str) -> list[str]:
    if not os.path.isdir(directory):
        raise UsageError(f"{directory}: not a directory")
    names = sorted(f for f in os.listdir(directory) if f.lower().endswith(IMAGE_EXTS))
    if not names:
        raise UsageError(f"{directory}: no .png/.ppm images found")
    return names


def _parse_size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)[xX](\d+)", text.strip())
    if not m:
        raise UsageError(f"--input must look like HxW, got {text!r}")
    h, w = int(m.group(1)), int(m.group(2))
    if h < 1 or w < 1:
        raise UsageError("--input sizes must be positive")
    return h, w


def _parse_patch(text: str) -> tuple[int, int, int, int]:
    parts = text.split(",")
    if len(parts) != 4:
        raise UsageError(f"--patch must be x,y,w,h, got {text!r}")
    try:
        return tuple(int(p) for p in parts)  # type: ignore[return-value]
    except ValueError:
        raise UsageError(f"--patch must be integers, got {text!r}") from None


# --- model loading -----------------------------------------------------------


def infer_model_config(entries: dict, base=None):
    """Rebuild a :class:`ModelConfig` from checkpoint tensor shapes.

    ``alpha`` is not stored in the weights; it comes from ``base`` (default 0.01).
    """
    from .model import ModelConfig

    base = base or ModelConfig()
    try:
        c, cin = entries["conv_first.weight"].shape[:2]
        groups = sorted({int(k.split(".")[1]) for k in entries if k.startswith("groups.")})
        blocks = {int(k.split(".")[3]) for k in entries if k.startswith("groups.0.blocks.")}
        table = entries["groups.0.blocks.0.attn.bias_table"]
        heads = table.shape[0]
        m = (int(round(math.sqrt(table.shape[1]))) + 1) // 2
        hidden = entries["groups.0.blocks.0.mlp.fc1.weight"].shape[0]
        ups = sorted({k.split(".")[1] for k in entries if k.startswith("upsample.")})
        if len(ups) != 1:
            raise FormatError(f"expected one upsampler, found {ups}")
        scale = int(ups[0][1:])
        up_ch = entries["conv_before_upsample.weight"].shape[0]
    except KeyError as e:
        raise UsageError(f"checkpoint lacks tensor {e.args[0]!r}; pass --config") from None
    over = dict(in_channels=int(cin), embed_dim=int(c), num_rhag=len(groups), habs_per_rhag=len(blocks),
                window_size=m, num_heads=int(heads), mlp_ratio=hidden / c, scale=scale,
                upsample_channels=int(up_ch))
    cab = "groups.0.blocks.0.cab.conv1.weight"
    over["enable_cab"] = cab in entries
    if over["enable_cab"]:
        over["cab_depthwise"] = "groups.0.blocks.0.cab.dw1.weight" in entries
        over["cab_beta"] = int(c // entries[cab].shape[0])
        over["ca_reduction"] = int(c // entries["groups.0.blocks.0.cab.ca_down.weight"].shape[0])
    ot = "groups.0.ocab.attn.bias_table"
    over["enable_ocab"] = ot in entries
    if over["enable_ocab"]:
        mo = int(round(math.sqrt(entries[ot].shape[1]))) + 1 - m
        over["oca_gamma"] = (mo / m - 1) / 2
    return base.replace(**over)


def load_model(ckpt: str, config: str | None = None):
    from .config import load_model_config
    from .io import decode_checkpoint, load_checkpoint, split_adam
    from .model import HAT

    if not os.path.isfile(ckpt):
        raise UsageError(f"{ckpt}: no such checkpoint")
    if config:
        cfg = load_model_config(config)
    else:
        with open(ckpt, "rb") as f:
            entries, _ = split_adam(decode_checkpoint(f.read(), ckpt))
        cfg = infer_model_config(entries)
    model = HAT(cfg, seed=0)
    load_checkpoint(ckpt, strict=True, into=model.params)
    return model


def _super_resolve(model, img: np.ndarray) -> np.ndarray:
    with T.no_record():
        out = model(T.Tensor(img[None].astype(T.get_default_dtype())))
    return np.clip(out.data[0].astype(np.float64), 0.0, 1.0)


# --- subcommands -------------------------------------------------------------


def cmd_complexity(args) -> int:
    from .complexity import complexity_report
    from .config import load_model_config

    h, w = _parse_size(args.input)
    cfg = load_model_config(args.config)
    print(complexity_report(cfg, h, w).to_text())
    return 0


def _dataset_from_dirs(hr_dir: str, lr_dir: str | None, scale: int):
    from .io import load_image
    from .train import PairedDataset

    names = _list_images(hr_dir)
    hr = [load_image(os.path.join(hr_dir, n)) for n in names]
    lr = None
    if lr_dir:
        lr = [load_image(os.path.join(lr_dir, n)) for n in names]
    return PairedDataset(hr, scale, lr)


def _run_training(args, phase: str) -> int:
    from .config import parse_config, serialize
    from .io import load_checkpoint
    from .model import HAT
    from .train import carried_adam, train_loop

    run = parse_config(args.config) if args.config else parse_config({})
    changes = {"phase": phase}
    if args.iters is not None:
        changes["total_iters"] = args.iters
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "init", None):
        changes["init_checkpoint"] = args.init
    if phase == "finetune" and "base_lr" not in _explicit_train_keys(args.config):
        changes["base_lr"] = None
    if phase != run.train.phase and "milestones" not in _explicit_train_keys(args.config):
        changes["milestones"] = None
    tcfg = run.train.replace(**changes)
    hr_dir = args.hr or run.paths.train_hr
    if not hr_dir:
        raise UsageError("no training images: pass --hr or set paths.train_hr")
    out_dir = args.out or run.paths.output
    if tcfg.init_checkpoint and not os.path.isfile(tcfg.init_checkpoint):
        raise UsageError(f"{tcfg.init_checkpoint}: no such checkpoint")
    data = _dataset_from_dirs(hr_dir, args.lr or run.paths.train_lr, run.model.scale)

    model = HAT(run.model, seed=tcfg.seed)
    adam = None
    if tcfg.init_checkpoint:
        tree = load_checkpoint(tcfg.init_checkpoint, strict=not args.non_strict, into=model.params)
        if tree.report.skipped:
            print(f"# reinitialized {len(tree.report.skipped)} tensors: "
                  + ", ".join(tree.report.skipped[:10]), file=sys.stderr)
        adam = carried_adam(tree.adam, tree.report.loaded)
    os.makedirs(out_dir, exist_ok=True)
    run.train = tcfg
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        f.write(serialize(run))
    with open(os.path.join(out_dir, "train_log.tsv"), "w", encoding="utf-8") as log:
        log.write("iter\tlr\tloss\n")
        res = train_loop(model, data, tcfg, out_dir, adam=adam, log_file=log)
    it, lr, loss = res.history[-1]
    print(f"{it}\t{lr:.6g}\t{loss:.8f}")
    return 0


def _explicit_train_keys(config_path: str | None) -> set:
    if not config_path:
        return set()
    import json

    with open(config_path, encoding="utf-8") as f:
        raw = json.load(f)
    return set((raw.get("train") or {}).keys())


def cmd_train(args) -> int:
    return _run_training(args, args.phase)


def cmd_finetune(args) -> int:
    if not args.init:
        raise ConfigError("finetune requires --init CHECKPOINT")
    return _run_training(args, "finetune")


def cmd_sr(args) -> int:
    from .io import load_image, save_image

    if not os.path.isfile(args.input):
        raise UsageError(f"{args.input}: no such file")
    model = load_model(args.ckpt, args.config)
    img = load_image(args.input)
    save_image(_super_resolve(model, img), args.out)
    return 0


def cmd_eval(args) -> int:
    from .io import load_image
    from .metrics import evaluate_pair

    names = _list_images(args.hr)
    missing = [n for n in names if not os.path.isfile(os.path.join(args.sr, n))]
    if missing:
        raise UsageError(f"{args.sr}: missing SR images {missing[:10]}")
    crop = args.crop if args.crop is not None else args.scale
    rows = []
    for n in names:
        hr = load_image(os.path.join(args.hr, n))
        sr = load_image(os.path.join(args.sr, n))
        if hr.shape != sr.shape:
            raise DimensionError(f"{n}: HR {hr.shape[1:]} and SR {sr.shape[1:]} differ")
        rows.append((n, evaluate_pair(sr, hr, crop, args.channel)))
    print("file\tpsnr\tssim")
    for n, r in rows:
        print(f"{n}\t{r.psnr_db:.4f}\t{r.ssim:.6f}")
    return 0


def cmd_lam(args) -> int:
    from .attribution import heatmap, lam_attribute, write_lamp
    from .io import load_image, save_image

    if not os.path.isfile(args.input):
        raise UsageError(f"{args.input}: no such file")
    patch = _parse_patch(args.patch)
    if args.steps < 2:
        raise UsageError("--steps must be >= 2")
    model = load_model(args.ckpt, args.config)
    img = load_image(args.input)
    res = lam_attribute(model, img, patch, steps=args.steps, sigma=args.sigma)
    save_image(heatmap(res.saliency, img), f"{args.out}.png")
    write_lamp(f"{args.out}.lamp", res.saliency)
    print("file\tdi\tsteps\tsigma")
    print(f"{os.path.basename(args.input)}\t{res.di:.4f}\t{res.steps}\t{res.baseline_sigma}")
    return 0


def cmd_features(args) -> int:
    from .attribution import dump_features
    from .io import load_image

    if not os.path.isfile(args.input):
        raise UsageError(f"{args.input}: no such file")
    model = load_model(args.ckpt, args.config)
    paths = dump_features(model, load_image(args.input), args.group, args.out_dir)
    for p in paths:
        print(p)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(print)
    return 0 if ok else 2


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hatsr", description="Hybrid attention transformer for image super-resolution.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def train_flags(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--hr", help="directory of HR training images")
        sp.add_argument("--lr", help="directory of matching LR images (default: bicubic from HR)")
        sp.add_argument("--out", help="output directory for checkpoints and logs")
        sp.add_argument("--iters", type=int, help="override train.total_iters")
        sp.add_argument("--seed", type=int, help="override train.seed")
        sp.add_argument("--init", help="initial checkpoint")
        sp.add_argument("--non-strict", action="store_true",
                        help="load only matching tensors from --init (e.g. x2 weights into x4)")

    sp = sub.add_parser("train", help="train from scratch or pre-train")
    train_flags(sp)
    sp.add_argument("--phase", choices=("scratch", "pretrain"), default="scratch")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="fine-tune from a checkpoint with the small learning rate")
    train_flags(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("sr", help="super-resolve one image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--config", help="JSON config (default: inferred from the checkpoint)")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sr)

    sp = sub.add_parser("eval", help="Y-channel PSNR/SSIM between two image directories")
    sp.add_argument("--hr", required=True)
    sp.add_argument("--sr", required=True)
    sp.add_argument("--crop", type=int, help="border crop in pixels (default: --scale)")
    sp.add_argument("--scale", type=int, default=4)
    sp.add_argument("--channel", choices=("Y", "RGB"), default="Y")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("lam", help="integrated-gradient attribution for an SR patch")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--config")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--patch", required=True, help="x,y,w,h in SR pixels")
    sp.add_argument("--steps", type=int, default=32)
    sp.add_argument("--sigma", type=float, default=4.0)
    sp.add_argument("--out", required=True, help="output prefix; writes PREFIX.png and PREFIX.lamp")
    sp.set_defaults(func=cmd_lam)

    sp = sub.add_parser("complexity", help="parameter and multiply-add table")
    sp.add_argument("--config")
    sp.add_argument("--input", default="64x64", help="LR input size HxW")
    sp.set_defaults(func=cmd_complexity)

    sp = sub.add_parser("features", help="dump the feature maps after one residual group")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--config")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--group", type=int, required=True, help="1-based group index")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("selftest", help="quick numerical self-checks")
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        from threadpoolctl import threadpool_limits

        limit = _thread_limit()
        args = build_parser().parse_args(argv)
        with threadpool_limits(limits=limit):
            return args.func(args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (UsageError, ConfigError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (HatError, OSError, FloatingPointError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
