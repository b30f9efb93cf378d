import numpy as np
import pytest

from invrender import _accel

BACKENDS = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_unit(rng, shape):
    v = rng.normal(size=shape + (3,))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# -- training fixtures ------------------------------------------------------------

import time  # noqa: E402
from dataclasses import replace  # noqa: E402
from types import SimpleNamespace  # noqa: E402

from invrender import scene, training  # noqa: E402
from invrender.models import ModelConfig  # noqa: E402

TINY_MODEL = ModelConfig(height=32, width=40, base_channels=4, res_blocks=1, env_res_blocks=1, light_strides=1)


def tiny_config(steps=8, **overrides):
    cfg = training.TrainConfig(
        model=TINY_MODEL,
        optimizer=training.OptimizerConfig(lr=2e-3),
        data=training.DataConfig(batch_size=2),
        steps={s: steps for s in training.STAGES},
        checkpoint_every=4,
    )
    return replace(cfg, **overrides)


def tiny_data(count=4, seed=3):
    common = dict(height=32, width=40, shadows=True, shadow_strength=0.3, sharpness=training.SMOKE_SHARPNESS)
    return SimpleNamespace(
        synthetic=scene.analytic_fixtures(count, seed, prefix="syn", **common),
        real=scene.analytic_fixtures(count, seed + 1, judgments=20, prefix="real", **common),
        envs=[scene.random_indoor_env(np.random.default_rng(seed + 2 + i), sharpness=training.SMOKE_SHARPNESS)
              for i in range(count)],
    )


def run_tiny_pipeline(root, cfg=None, data=None, stages=training.STAGES):
    cfg = cfg or tiny_config()
    data = data or tiny_data()
    run = training.RunDir(root)
    results = {}
    calls = {
        "env_a": lambda: training.train_env_stage_a(data.envs, data.synthetic, cfg, run),
        "env_b": lambda: training.train_env_stage_b(data.synthetic, cfg, run),
        "irn_syn": lambda: training.train_irn_synthetic(data.synthetic, cfg, run),
        "rar_syn": lambda: training.train_rar_synthetic(data.synthetic, cfg, run),
        "irn_real_iiw": lambda: training.finetune_irn_real(data.real, "IIW", cfg, run),
        "irn_real_nyu": lambda: training.finetune_irn_real(data.real, "NYU", cfg, run),
    }
    for stage in stages:
        results[stage] = calls[stage]()
    return SimpleNamespace(cfg=cfg, data=data, run=run, results=results)


@pytest.fixture(scope="session")
def tiny_pipeline(tmp_path_factory):
    return run_tiny_pipeline(tmp_path_factory.mktemp("tiny"))


@pytest.fixture(scope="session")
def smoke_pipeline(tmp_path_factory):
    """All six stages at desk scale on 8 analytic fixtures, with per-stage wall time."""
    cfg = training.smoke_config()
    raw = training.smoke_data(cfg)
    data = SimpleNamespace(synthetic=raw["synthetic"], real=raw["real"], envs=raw["envs"])
    run = training.RunDir(tmp_path_factory.mktemp("smoke"))
    results, seconds = {}, {}
    for stage in training.STAGES:
        start = time.process_time()
        results.update(run_tiny_pipeline(run.root, cfg, data, (stage,)).results)
        seconds[stage] = time.process_time() - start
    return SimpleNamespace(cfg=cfg, data=data, run=run, results=results, seconds=seconds)
