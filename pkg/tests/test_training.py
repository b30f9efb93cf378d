import json
import math
import shutil
from dataclasses import replace

import numpy as np
import pytest
import torch

from invrender import metrics, scene, training
from invrender.errors import NumericError, StageGateError, ValidationError
from invrender.grid import EnvironmentMap
from invrender.losses import composite_weights
from invrender.models import build_network, load_checkpoint, param_hash, read_sidecar
from invrender.render import fit_env_least_squares, shade_direct

from conftest import run_tiny_pipeline, tiny_config, tiny_data


def log_records(run, stage):
    return [json.loads(line) for line in run.log_path(stage).read_text().splitlines()]


# -- configuration ---------------------------------------------------------------


def test_config_from_toml_and_json(tmp_path):
    toml = tmp_path / "cfg.toml"
    toml.write_text(
        "[stage]\nseed = 7\nuse_rar = false\n\n[stage.steps]\nenv_a = 12\n\n"
        "[optimizer]\nlr = 0.01\n\n[loss]\ndelta = 0.2\n\n[data]\nbatch_size = 3\nmanifest = 'm.jsonl'\n"
    )
    cfg = training.TrainConfig.from_file(toml)
    assert (cfg.seed, cfg.use_rar, cfg.optimizer.lr, cfg.loss.delta, cfg.data.batch_size) == (7, False, 0.01, 0.2, 3)
    assert cfg.steps["env_a"] == 12 and cfg.steps["irn_syn"] == training.DEFAULT_STEPS["irn_syn"]
    js = tmp_path / "cfg.json"
    js.write_text(json.dumps({"seed": 7, "use_rar": False, "steps": {"env_a": 12}, "optimizer": {"lr": 0.01},
                              "loss": {"delta": 0.2}, "data": {"batch_size": 3, "manifest": "m.jsonl"}}))
    assert training.TrainConfig.from_file(js).digest() == cfg.digest()


def test_config_defaults_and_errors(tmp_path):
    cfg = training.TrainConfig()
    assert (cfg.optimizer.lr, cfg.data.batch_size, cfg.checkpoint_every, cfg.keep_last) == (1e-4, 4, 500, 2)
    with pytest.raises(ValidationError):
        training.TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ValidationError):
        training.TrainConfig.from_dict({"optimizer": {"momentum": 0.9}})
    with pytest.raises(ValidationError):
        training.TrainConfig.from_dict({"steps": {"stage_z": 3}})
    with pytest.raises(ValidationError):
        training.OptimizerConfig(schedule="step")
    with pytest.raises(ValidationError):
        training.OptimizerConfig(lr=0.0)
    with pytest.raises(ValidationError):
        training.OptimizerConfig(warmup=-1)
    bad = tmp_path / "bad.toml"
    bad.write_text("[stage\n")
    with pytest.raises(ValidationError):
        training.TrainConfig.from_file(bad)


# -- gating --------------------------------------------------------------------------


@pytest.mark.parametrize("stage", training.STAGES[1:])
def test_stage_gating_before_data(tmp_path, stage):
    run = training.RunDir(tmp_path)
    with pytest.raises(StageGateError):
        training.check_prerequisites(run, stage)
    cfg = tiny_config()
    # an empty sample list would be a data error; the gate must fire first
    calls = {
        "env_b": lambda: training.train_env_stage_b([], cfg, run),
        "irn_syn": lambda: training.train_irn_synthetic([], cfg, run),
        "rar_syn": lambda: training.train_rar_synthetic([], cfg, run),
        "irn_real_iiw": lambda: training.finetune_irn_real([], "IIW", cfg, run),
        "irn_real_nyu": lambda: training.finetune_irn_real([], "NYU", cfg, run),
    }
    with pytest.raises(StageGateError):
        calls[stage]()


def test_gate_message_names_missing_checkpoint(tmp_path):
    with pytest.raises(StageGateError, match="env_a"):
        training.check_prerequisites(tmp_path, "env_b")
    training.check_prerequisites(tmp_path, "env_a")
    with pytest.raises(ValidationError):
        training.check_prerequisites(tmp_path, "stage_z")


def test_env_stage_a_rejects_empty_env_set(tmp_path):
    with pytest.raises(ValidationError):
        training.train_env_stage_a([], tiny_data().synthetic, tiny_config(), tmp_path)


# -- the tiny pipeline -------------------------------------------------------------------


def test_tiny_pipeline_writes_checkpoints_and_logs(tiny_pipeline):
    run, cfg = tiny_pipeline.run, tiny_pipeline.cfg
    kinds = {"env_a": "env", "env_b": "env", "irn_syn": "irn", "rar_syn": "rar",
             "irn_real_iiw": "irn", "irn_real_nyu": "irn"}
    for stage, kind in kinds.items():
        ckpts = run.checkpoints(stage, kind)
        assert 1 <= len(ckpts) <= cfg.keep_last
        meta = read_sidecar(ckpts[-1])
        assert meta["stage"] == stage and meta["step"] == cfg.steps[stage]
        assert meta["config_hash"] == cfg.digest() and meta["seed"] == cfg.seed
        records = log_records(run, stage)
        assert [r["step"] for r in records] == list(range(cfg.steps[stage]))
        assert all(math.isfinite(r["loss"]) for r in records)


def test_irn_log_terms(tiny_pipeline):
    for r in log_records(tiny_pipeline.run, "irn_syn"):
        assert set(r) - {"step", "stage", "loss"} == {"normal", "albedo", "lighting"}
        assert r["loss"] == pytest.approx(r["normal"] + r["albedo"] + 0.5 * r["lighting"], rel=1e-5)


@pytest.mark.parametrize("mode", ["IIW", "NYU"])
def test_composite_log_uses_mode_weights(tiny_pipeline, mode):
    weights = composite_weights(mode)
    expected = {"IIW": {"L_a": 0.5, "L_n": 0.5, "L_e": 0.1, "L_u": 1.0, "L_w": 30.0},
                "NYU": {"L_a": 0.2, "L_e": 0.05, "L_u": 1.0, "L_w": 20.0}}[mode]
    assert {k: v for k, v in weights.items() if v} == expected
    for r in log_records(tiny_pipeline.run, f"irn_real_{mode.lower()}"):
        total = sum(weights.get(k, 0.0) * r[k] for k in ("L_a", "L_n", "L_e", "L_u", "L_w"))
        assert r["loss"] == pytest.approx(total, rel=1e-5)


def test_env_cache_entries_are_valid(tiny_pipeline):
    targets = training.read_env_cache(tiny_pipeline.run, [s.id for s in tiny_pipeline.data.synthetic])
    for env in targets.values():
        assert isinstance(env, EnvironmentMap)
        assert env.radiance.shape == (18, 36, 3) and np.all(env.radiance >= 0)


def test_env_b_cannot_beat_per_sample_nnls(tiny_pipeline):
    targets = tiny_pipeline.results["env_b"].extras["targets"]
    for s in tiny_pipeline.data.synthetic:
        fit = fit_env_least_squares(s.image, s.albedo, s.normal, mask=s.mask)
        learned = metrics.image_recon_error(s.image, s.albedo, s.normal, targets[s.id], s.mask)
        assert learned >= fit.residual - 1e-9


def test_env_a_renders_each_scene_under_distinct_envs(tmp_path):
    data = tiny_data()
    cfg = tiny_config(steps=2, data=training.DataConfig(batch_size=2, env_pairs=3))
    picks = training.train_env_stage_a(data.envs[:3], data.synthetic, cfg, tmp_path).extras["env_picks"]
    assert len(picks) == len(data.synthetic)
    assert all(sorted(row) == [0, 1, 2] for row in picks)
    capped = replace(cfg, data=training.DataConfig(batch_size=2, env_pairs=5))
    picks = training.train_env_stage_a(data.envs[:2], data.synthetic, capped, tmp_path / "b").extras["env_picks"]
    assert all(sorted(row) == [0, 1] for row in picks)
    with pytest.raises(ValidationError):
        bad = replace(cfg, data=training.DataConfig(env_pairs=0))
        training.train_env_stage_a(data.envs, data.synthetic, bad, tmp_path / "c")


def test_env_b_skips_samples_without_ground_truth(tmp_path, caplog):
    data = tiny_data()
    cfg = tiny_config(steps=2)
    run_tiny_pipeline(tmp_path, cfg, data, ("env_a",))
    bare = scene.SceneSample("bare", data.synthetic[0].image, data.synthetic[0].mask)
    res = training.train_env_stage_b(data.synthetic + [bare], cfg, tmp_path)
    assert res.extras["skipped"] == ["bare"]
    assert "bare" in caplog.text


def test_rar_frozen_during_fine_tuning(tiny_pipeline):
    rar, _ = load_checkpoint(tiny_pipeline.run.latest("rar_syn", "rar"))
    for mode in ("iiw", "nyu"):
        assert tiny_pipeline.results[f"irn_real_{mode}"].extras["rar_hash"] == param_hash(rar)


def test_fine_tuning_modes_and_use_rar_switch(tmp_path, tiny_pipeline):
    shutil.copytree(tiny_pipeline.run.root, tmp_path / "run")
    cfg = tiny_config(use_rar=False)
    res = training.finetune_irn_real(tiny_pipeline.data.real, "IIW", cfg, tmp_path / "run")
    assert read_sidecar(res.checkpoints["irn"])["use_rar"] is False
    with_rar = log_records(tiny_pipeline.run, "irn_real_iiw")[0]
    without = log_records(training.RunDir(tmp_path / "run"), "irn_real_iiw")[0]
    # same initial network and batch: only the residual term changes L_u
    assert with_rar["L_a"] == without["L_a"] and with_rar["L_w"] == without["L_w"]
    assert with_rar["L_u"] != without["L_u"]
    with pytest.raises(ValidationError):
        training.finetune_irn_real(tiny_pipeline.data.real, "MIT", cfg, tmp_path / "run")


def test_without_rar_reconstruction_is_direct_only(tmp_path, tiny_pipeline):
    shutil.copytree(tiny_pipeline.run.root, tmp_path / "run")
    run = training.RunDir(tmp_path / "run")
    cfg = tiny_config(steps=1, use_rar=False, data=training.DataConfig(batch_size=len(tiny_pipeline.data.real)))
    training.finetune_irn_real(tiny_pipeline.data.real, "NYU", cfg, run)
    logged = log_records(run, "irn_real_nyu")[0]["L_u"]
    irn, _ = load_checkpoint(run.require("irn_syn", "irn"))
    data = training.to_tensors(tiny_pipeline.data.real)
    with torch.no_grad():
        irn.train()
        a, n, e = irn(data.image)
        from invrender.losses import reconstruction_loss
        from invrender.render import shade_direct_torch
        direct = shade_direct_torch(a, n, e, mask=data.mask)
        ref = float(reconstruction_loss(data.image, direct, None, data.mask))
    assert logged == pytest.approx(ref, rel=1e-5)


def test_nyu_requires_normals(tmp_path, tiny_pipeline):
    shutil.copytree(tiny_pipeline.run.root, tmp_path / "run")
    bare = [scene.SceneSample(s.id, s.image, s.mask) for s in tiny_pipeline.data.real]
    with pytest.raises(ValidationError):
        training.finetune_irn_real(bare, "NYU", tiny_config(), tmp_path / "run")
    with pytest.raises(ValidationError):
        training.finetune_irn_real(bare, "IIW", tiny_config(), tmp_path / "run")


# -- determinism and failure handling ------------------------------------------------------


def test_step_100_loss_is_bitwise_reproducible(tmp_path):
    data = tiny_data()
    cfg = tiny_config(steps=101, checkpoint_every=1000)
    a = run_tiny_pipeline(tmp_path / "a", cfg, data, ("env_a",)).results["env_a"]
    b = run_tiny_pipeline(tmp_path / "b", cfg, data, ("env_a",)).results["env_a"]
    assert a.losses[100] == b.losses[100]
    assert a.losses == b.losses
    assert param_hash(load_checkpoint(a.checkpoints["env"])[0]) == param_hash(load_checkpoint(b.checkpoints["env"])[0])
    c = run_tiny_pipeline(tmp_path / "c", tiny_config(steps=101, seed=1), data, ("env_a",)).results["env_a"]
    assert c.losses[100] != a.losses[100]


def test_cosine_schedule_is_deterministic_and_anneals(tmp_path):
    data = tiny_data()
    opt = training.OptimizerConfig(lr=2e-3, schedule="cosine")
    cfg = tiny_config(steps=6, optimizer=opt)
    a = run_tiny_pipeline(tmp_path / "a", cfg, data, ("env_a",)).results["env_a"]
    b = run_tiny_pipeline(tmp_path / "b", cfg, data, ("env_a",)).results["env_a"]
    const = run_tiny_pipeline(tmp_path / "c", tiny_config(steps=6), data, ("env_a",)).results["env_a"]
    assert a.losses == b.losses
    # same first step (full lr), then the annealed run diverges from the constant one
    assert a.losses[:2] == const.losses[:2] and a.losses[2:] != const.losses[2:]


def test_warmup_ramps_then_anneals():
    opt = training.OptimizerConfig(schedule="cosine", warmup=4)
    factors = [opt.factor(i, 12) for i in range(12)]
    assert factors[:4] == [0.25, 0.5, 0.75, 1.0]
    assert factors[4] == 1.0 and all(a > b for a, b in zip(factors[4:], factors[5:]))
    assert factors[-1] > 0.0
    assert [training.OptimizerConfig(warmup=2).factor(i, 5) for i in range(5)] == [0.5, 1.0, 1.0, 1.0, 1.0]


def test_keep_last_retention(tmp_path):
    res = run_tiny_pipeline(tmp_path, tiny_config(steps=12, checkpoint_every=2), tiny_data(), ("env_a",))
    ckpts = res.run.checkpoints("env_a", "env")
    assert [read_sidecar(p)["step"] for p in ckpts] == [10, 12]


def test_non_finite_loss_aborts_with_checkpoint(tmp_path):
    cfg = tiny_config(steps=5)
    run = training.RunDir(tmp_path)
    net = build_network("env", cfg.model, 0)
    data = training.to_tensors(tiny_data().synthetic)
    calls = {"n": 0}

    def objective(b):
        calls["n"] += 1
        loss = net(b.image, b.albedo, b.normal).mean()
        return (loss * float("nan") if calls["n"] > 4 else loss), {}

    with pytest.raises(NumericError, match="non-finite"):
        training._fit("env_a", {"env": net}, objective, data, cfg, run, cfg.steps["env_a"])
    last = run.latest("env_a", "env")
    assert read_sidecar(last)["aborted"] is True


# -- evaluation ---------------------------------------------------------------------------------


def test_evaluate_reproduces_training_metrics(tiny_pipeline, tmp_path):
    run, samples = tiny_pipeline.run, tiny_pipeline.data.synthetic
    stored = json.loads((run.stage_dir("irn_syn") / "train_metrics.json").read_text())
    ckpt = run.latest("irn_syn", "irn")
    reports = training.evaluate(ckpt, samples, ("angular", "albedo", "recon"), tmp_path / "r.json")
    for r in reports:
        assert r.value == pytest.approx(stored[r.name], abs=1e-6)
        assert r.sample_count == len(samples)


def test_evaluate_is_deterministic(tiny_pipeline, tmp_path):
    ckpt = tiny_pipeline.run.latest("irn_real_iiw", "irn")
    for name in ("a.json", "b.json"):
        training.evaluate(ckpt, tiny_pipeline.data.real, ("whdr", "angular", "env"), tmp_path / name)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    payload = json.loads((tmp_path / "a.json").read_text())
    assert payload["n"] == len(tiny_pipeline.data.real) and "config" in payload


def test_evaluate_counts_only_supported_samples(tiny_pipeline):
    real = tiny_pipeline.data.real
    mixed = real[:2] + [scene.SceneSample(s.id, s.image, s.mask) for s in real[2:]]
    reports = training.evaluate(tiny_pipeline.run.latest("irn_syn", "irn"), mixed, ("whdr", "recon"))
    counts = {r.name: r.sample_count for r in reports}
    assert counts == {"whdr": 2, "recon": len(real)}


def test_evaluate_errors(tiny_pipeline):
    synthetic = tiny_pipeline.data.synthetic
    with pytest.raises(ValidationError, match="judgments"):
        training.evaluate(tiny_pipeline.run.latest("irn_syn", "irn"), synthetic, ("whdr",))
    with pytest.raises(ValidationError):
        training.evaluate(tiny_pipeline.run.latest("env_b", "env"), synthetic, ("recon",))
    with pytest.raises(ValidationError):
        training.evaluate(tiny_pipeline.run.latest("irn_syn", "irn"), synthetic, ("psnr",))


def test_decompose_outputs(tiny_pipeline):
    irn, _ = load_checkpoint(tiny_pipeline.run.latest("irn_syn", "irn"))
    rar, _ = load_checkpoint(tiny_pipeline.run.latest("rar_syn", "rar"))
    image = tiny_pipeline.data.real[0].image
    out = training.decompose(irn, image, rar)
    assert out["albedo"].shape == image.shape and out["env"].radiance.shape == (18, 36, 3)
    np.testing.assert_allclose(np.linalg.norm(out["normal"], axis=-1), 1.0, atol=1e-5)
    direct = shade_direct(out["albedo"], out["normal"], out["env"])
    np.testing.assert_allclose(out["direct"], direct, atol=1e-5)
    assert not np.any(training.decompose(irn, image)["residual"])


# -- smoke-scale learning checks ------------------------------------------------------------------


def best_constant_env_error(s, grid=np.linspace(0.0, 0.05, 2001)):
    """Brute force over constant radiance per channel; returns the best masked MAD."""
    unit = shade_direct(s.albedo, s.normal, np.ones((18, 36, 3)), mask=s.mask)[s.mask]
    target = s.image[s.mask]
    per = [np.min(np.mean(np.abs(unit[:, k][None] * grid[:, None] - target[:, k][None]), axis=1)) for k in range(3)]
    return float(np.mean(per))


def test_env_a_beats_best_constant_env_on_held_out_scene(smoke_pipeline):
    net, _ = load_checkpoint(smoke_pipeline.run.latest("env_a", "env"))
    h, w = smoke_pipeline.cfg.model.height, smoke_pipeline.cfg.model.width
    held = scene.analytic_fixtures(4, seed=99, height=h, width=w, sharpness=training.SMOKE_SHARPNESS, prefix="held")
    wins = 0
    for s in held:
        data = training.to_tensors([s])
        with torch.no_grad():
            pred = training.env_from_tensor(net(data.image, data.albedo, data.normal)[0])
        err = metrics.image_recon_error(s.image, s.albedo, s.normal, pred, s.mask)
        wins += err < best_constant_env_error(s)
    assert wins == len(held)


def test_env_b_does_not_increase_reconstruction(smoke_pipeline):
    res = smoke_pipeline.results["env_b"]
    assert res.final_objective <= res.initial_objective


def test_irn_overfit_angular_error(smoke_pipeline):
    reports = {r.name: r.value for r in smoke_pipeline.results["irn_syn"].extras["metrics"]}
    assert reports["angular"] < 10.0


def test_rar_residual_negative_in_shadow(smoke_pipeline):
    rar, _ = load_checkpoint(smoke_pipeline.run.latest("rar_syn", "rar"))
    for s in smoke_pipeline.data.synthetic:
        shadow = s.meta["shadow"] & s.mask
        if shadow.sum() < 20:
            continue
        data = training.to_tensors([s])
        with torch.no_grad():
            residual = training.hwc(rar(data.image, data.albedo, data.normal)[0])
        assert residual[shadow].mean() < 0
        assert residual[shadow].mean() < residual[s.mask & ~shadow].mean()


def test_iiw_fine_tuning_lowers_whdr(smoke_pipeline):
    real = smoke_pipeline.data.real
    before = training.evaluate(smoke_pipeline.run.latest("irn_syn", "irn"), real, ("whdr",))[0].value
    after = training.evaluate(smoke_pipeline.run.latest("irn_real_iiw", "irn"), real, ("whdr",))[0].value
    assert after < before
