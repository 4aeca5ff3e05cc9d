import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from hatsr.model import ModelConfig  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def tiny_config(**over) -> ModelConfig:
    base = dict(embed_dim=8, num_rhag=1, habs_per_rhag=2, window_size=4, num_heads=2, cab_beta=2,
                ca_reduction=4, scale=2, upsample_channels=4, mlp_ratio=2.0)
    base.update(over)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def trained_toy(tmp_path_factory):
    """The small network trained to memorize eight synthetic patches.

    Runs once per session (a few minutes on one core) in single-threaded mode.
    """
    import time
    from types import SimpleNamespace

    from threadpoolctl import threadpool_limits

    from hatsr.model import HAT
    from hatsr.toy import synthetic_dataset, toy_model_config, toy_train_config
    from hatsr.train import train_loop

    out = tmp_path_factory.mktemp("toy")
    model = HAT(toy_model_config(), seed=0)
    data = synthetic_dataset()
    cfg = toy_train_config()
    with threadpool_limits(limits=1):
        t0 = time.perf_counter()
        res = train_loop(model, data, cfg, out_dir=str(out))
        seconds = time.perf_counter() - t0
    return SimpleNamespace(model=model, data=data, cfg=cfg, result=res, seconds=seconds,
                           ckpt=str(out / "final.ckpt"), out=out)
