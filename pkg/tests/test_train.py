import logging
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hatsr import tensor as T
from hatsr.errors import ConfigError, DimensionError, NonFiniteError, UsageError
from hatsr.io import load_checkpoint
from hatsr.model import HAT, ParamTree
from hatsr.resize import bicubic_resize
from hatsr.train import (
    AdamState, PairedDataset, TrainConfig, TrainingDiverged, adam_step, carried_adam, augment_pair, l1_loss, lr_at,
    sample_batch, scaled_milestones, train_loop,
)
from hatsr.tensor import Tensor

from conftest import tiny_config
from oracles import adam_scalar


def _tree(**arrays):
    return ParamTree((k, Tensor(v, requires_grad=True, dtype=np.float64)) for k, v in arrays.items())


# --- loss --------------------------------------------------------------------


def test_l1_values_and_gradient():
    with T.precision("float64"):
        a = np.random.default_rng(0).standard_normal((2, 3))
        assert float(l1_loss(Tensor(a), Tensor(a)).data) == 0.0
        assert float(l1_loss(Tensor(a + 1), Tensor(a)).data) == pytest.approx(1.0)
        p = Tensor(a, requires_grad=True)
        b = np.zeros_like(a)
        with T.Tape() as tape:
            loss = l1_loss(p, Tensor(b))
        T.backward(loss, tape)
        np.testing.assert_array_equal(p.grad, np.sign(a) / a.size)


def test_l1_tie_subgradient_is_zero_and_shape_error():
    p = Tensor(np.ones(4), requires_grad=True)
    with T.Tape() as tape:
        loss = l1_loss(p, Tensor(np.ones(4)))
    T.backward(loss, tape)
    assert not p.grad.any()
    with pytest.raises(DimensionError):
        l1_loss(Tensor(np.ones(3)), Tensor(np.ones(4)))


# --- Adam --------------------------------------------------------------------


def test_adam_first_step_is_lr_times_sign():
    g = np.array([3.0, -0.02, 1e-3, -50.0])
    p = _tree(w=np.zeros(4))
    adam_step(p, {"w": g}, AdamState(), 1e-2, TrainConfig())
    np.testing.assert_allclose(p["w"].data, -1e-2 * np.sign(g), rtol=1e-4)


def test_adam_zero_gradient_leaves_parameters():
    w0 = np.random.default_rng(1).standard_normal(5)
    p = _tree(w=w0.copy())
    st_ = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros(5)}, st_, 1e-2, TrainConfig())
    np.testing.assert_array_equal(p["w"].data, w0)


def test_adam_three_steps_on_square_match_scalar_reference():
    cfg = TrainConfig()
    p = _tree(x=np.array([1.0]))
    st_ = AdamState()
    got = []
    for _ in range(3):
        adam_step(p, {"x": 2 * p["x"].data}, st_, 0.1, cfg)
        got.append(float(p["x"].data[0]))
    assert got == adam_scalar(1.0, lambda x: 2 * x, 0.1, 3)


def test_adam_lr_zero_is_bitwise_noop():
    rng = np.random.default_rng(2)
    w0 = rng.standard_normal((3, 3)).astype(np.float32)
    p = ParamTree([("w", Tensor(w0.copy(), requires_grad=True))])
    adam_step(p, {"w": rng.standard_normal((3, 3))}, AdamState(), 0.0, TrainConfig())
    assert p["w"].data.tobytes() == w0.tobytes()


def test_adam_nan_gradient_names_parameter():
    p = _tree(**{"groups.0.conv.weight": np.zeros(2)})
    with pytest.raises(NonFiniteError, match=r"groups\.0\.conv\.weight"):
        adam_step(p, {"groups.0.conv.weight": np.array([0.0, np.nan])}, AdamState(), 1e-3, TrainConfig())


# --- schedule ----------------------------------------------------------------


def test_reference_schedule_points():
    cfg = TrainConfig()
    assert cfg.milestones == [250_000, 400_000, 450_000, 475_000]
    assert lr_at(0, cfg) == 2e-4
    assert lr_at(260_000, cfg) == 1e-4
    assert lr_at(480_000, cfg) == 1.25e-5


def test_finetune_defaults():
    cfg = TrainConfig(phase="finetune", init_checkpoint="x.ckpt", total_iters=250_000)
    assert cfg.base_lr == 1e-5
    assert cfg.milestones == [125_000, 200_000, 230_000, 240_000]


def test_scaled_milestones_keep_proportions():
    assert scaled_milestones("scratch", 2000) == [1000, 1600, 1800, 1900]
    assert scaled_milestones("scratch", 4) == [2, 3]  # collisions are dropped


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10_000), st.sampled_from(["scratch", "pretrain"]))
def test_property_lr_non_increasing_with_one_break_per_milestone(total, phase):
    cfg = TrainConfig(total_iters=total, phase=phase)
    lrs = [lr_at(i, cfg) for i in range(total)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    breaks = sum(1 for a, b in zip(lrs, lrs[1:]) if b != a)
    assert breaks == len(cfg.milestones)


@pytest.mark.parametrize("kw", [dict(milestones=[5, 3]), dict(milestones=[10], total_iters=10),
                                dict(phase="finetune"), dict(base_lr=-1.0), dict(batch_size=0),
                                dict(phase="warmup")])
def test_train_config_errors(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_replace_rescales_milestones():
    cfg = TrainConfig().replace(total_iters=1000)
    assert cfg.milestones == [500, 800, 900, 950]


# --- data --------------------------------------------------------------------


def _dataset(scale=4, n=3, size=48, seed=0):
    rng = np.random.default_rng(seed)
    return PairedDataset([rng.random((3, size, size)) for _ in range(n)], scale)


def test_sample_batch_alignment_scale_four():
    data = _dataset(scale=4, size=96)
    lr, hr, meta = sample_batch(data, 16, 4, np.random.default_rng(0), batch_size=3, augment=False,
                                return_meta=True)
    assert lr.shape == (3, 3, 16, 16) and hr.shape == (3, 3, 64, 64)
    for i, m in enumerate(meta):
        (ly, lx), (hy, hx) = m["lr_offset"], m["hr_offset"]
        assert (hy, hx) == (4 * ly, 4 * lx)
        np.testing.assert_array_equal(lr[i], data.lr[m["index"]][:, ly:ly + 16, lx:lx + 16].astype(np.float32))
        np.testing.assert_array_equal(hr[i], data.hr[m["index"]][:, hy:hy + 64, hx:hx + 64].astype(np.float32))


def test_sample_batch_is_deterministic():
    data = _dataset()
    a = [sample_batch(data, 8, 4, r, 2) for r in [np.random.default_rng(5)] for _ in range(3)]
    b = [sample_batch(data, 8, 4, r, 2) for r in [np.random.default_rng(5)] for _ in range(3)]
    for (la, ha), (lb, hb) in zip(a, b):
        assert la.tobytes() == lb.tobytes() and ha.tobytes() == hb.tobytes()


@pytest.mark.parametrize("k,flip", [(k, f) for k in range(4) for f in (False, True)])
def test_augmentation_is_shared_by_the_pair(k, flip):
    data = _dataset(scale=2, size=16)
    lr, hr = augment_pair(data.lr[0], data.hr[0], k, flip)
    # degradation commutes with the dihedral ops because the kernel is symmetric
    np.testing.assert_allclose(bicubic_resize(np.ascontiguousarray(hr), 0.5), lr, atol=1e-12)


def test_lr_patch_is_bicubic_of_hr_patch():
    data = _dataset(scale=2, size=40)
    with T.precision("float64"):
        lr, hr = sample_batch(data, 20, 2, np.random.default_rng(1), 2, augment=True)
    # interior only: at the crop edge the resize sees a mirrored border instead of the neighbours
    down = bicubic_resize(hr, 0.5)
    assert np.abs(down[..., 2:-2, 2:-2] - lr[..., 2:-2, 2:-2]).max() < 1e-6


def test_full_image_patch_is_exact_bicubic():
    data = _dataset(scale=2, size=24, n=1)
    with T.precision("float64"):
        lr, hr = sample_batch(data, 12, 2, np.random.default_rng(0), 1, augment=False)
    assert np.abs(bicubic_resize(hr, 0.5) - lr).max() < 1e-6


def test_small_images_are_skipped_with_warning(caplog):
    rng = np.random.default_rng(0)
    data = PairedDataset([rng.random((3, 64, 64)), rng.random((3, 8, 8))], 2)
    with caplog.at_level(logging.WARNING):
        _, _, meta = sample_batch(data, 16, 2, rng, 3, return_meta=True)
    assert {m["index"] for m in meta} == {0}
    assert "skipping 1" in caplog.text
    with pytest.raises(UsageError):
        sample_batch(PairedDataset([rng.random((3, 8, 8))], 2), 16, 2, rng)


def test_misaligned_pairs_are_rejected():
    with pytest.raises(DimensionError):
        PairedDataset([np.zeros((3, 16, 16))], 2, lr_images=[np.zeros((3, 7, 8))])


# --- loop --------------------------------------------------------------------


def _tiny_run(tmp_path, iters=3, **kw):
    model = HAT(tiny_config(), seed=0)
    data = _dataset(scale=2, size=24, n=2)
    cfg = TrainConfig(batch_size=1, patch_size=8, total_iters=iters, base_lr=1e-3, log_every=1, **kw)
    return model, data, cfg


def test_loop_logs_and_checkpoints(tmp_path):
    model, data, cfg = _tiny_run(tmp_path, iters=4, milestones=[2])
    log_path = tmp_path / "log.tsv"
    with open(log_path, "w") as f:
        res = train_loop(model, data, cfg, out_dir=str(tmp_path), log_file=f)
    rows = [ln.split("\t") for ln in log_path.read_text().splitlines()]
    assert [int(r[0]) for r in rows] == [0, 1, 2, 3]
    assert [float(r[1]) for r in rows] == [1e-3, 1e-3, 5e-4, 5e-4]
    assert [os.path.basename(p) for p in res.checkpoints] == ["iter_0000002.ckpt", "final.ckpt"]
    back = load_checkpoint(res.checkpoints[-1], into=HAT(tiny_config(), seed=1).params)
    assert back.adam.step == 4


def test_loop_is_reproducible(tmp_path):
    curves = []
    for _ in range(2):
        model, data, cfg = _tiny_run(tmp_path, iters=3)
        curves.append([h[2] for h in train_loop(model, data, cfg).history])
    assert curves[0] == curves[1]


def test_nan_aborts_and_keeps_last_good(tmp_path):
    model, data, cfg = _tiny_run(tmp_path, iters=5, milestones=[])

    def poison(it, loss):
        if it == 1:
            for h in data.hr:
                h[...] = np.nan

    with pytest.raises(TrainingDiverged):
        train_loop(model, data, cfg, out_dir=str(tmp_path), callback=poison)
    ref_model, ref_data, _ = _tiny_run(tmp_path)
    train_loop(ref_model, ref_data, cfg.replace(total_iters=2, milestones=[]))
    kept = load_checkpoint(str(tmp_path / "last_good.ckpt"))
    for k, t in ref_model.params.items():
        assert kept[k].data.tobytes() == t.data.astype(np.float32).tobytes(), k


def test_scale_mismatch_is_config_error(tmp_path):
    model, _, cfg = _tiny_run(tmp_path)
    with pytest.raises(ConfigError):
        train_loop(model, _dataset(scale=4), cfg)


def test_carried_adam_keeps_only_loaded_moments():
    st = AdamState({"a": np.ones(2), "b": np.full(3, 2.0)}, {"a": np.ones(2), "b": np.ones(3)}, 7)
    out = carried_adam(st, ["a", "c"])
    assert out.step == 7 and list(out.m) == ["a"] and list(out.v) == ["a"]
    out.m["a"][0] = 5.0
    assert st.m["a"][0] == 1.0
    assert carried_adam(None, ["a"]) is None


def test_fresh_adam_first_step_moves_every_weight_by_lr():
    # the reason fine-tuning continues from the stored moments
    rng = np.random.default_rng(0)
    params = ParamTree([("w", Tensor(rng.standard_normal(50), requires_grad=True, dtype=np.float64))])
    before = params["w"].data.copy()
    # gradients spanning two decades all give the same step size
    params["w"].grad = rng.choice([-1.0, 1.0], 50) * rng.uniform(1e-5, 1e-3, 50)
    adam_step(params, None, AdamState(), 1e-5, TrainConfig(phase="finetune", init_checkpoint="x"))
    assert np.allclose(np.abs(params["w"].data - before), 1e-5, rtol=1e-2)
