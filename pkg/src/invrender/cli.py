"""Command-line interface: ``invrender <command> [flags]``.

Exit codes: 0 success, 1 validation error (bad flags, bad data, missing
prerequisite stage), 2 I/O error, 3 numeric failure.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from invrender import scene, training
from invrender.errors import DataIOError, InvRenderError, ValidationError
from invrender.models import load_checkpoint, read_sidecar
from invrender.render import fit_env_least_squares, render_probe, shade_direct

log = logging.getLogger("invrender")

WEIGHTINGS = ("literal_sum", "solid_angle")


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with the validation code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def _load_config(args):
    cfg = training.TrainConfig.from_file(args.config) if args.config else training.TrainConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _weighting(args, cfg):
    return args.weighting or cfg.loss.weighting


def _read_normals(path):
    normal, deviation = scene.read_normals(path)
    if deviation > 0.1:
        log.warning("%s: decoded normals deviate from unit length by %.3f", path, deviation)
    return normal


def _read_mask(path, shape):
    if path is None:
        return np.ones(shape, dtype=bool)
    mask = scene.read_mask(path)
    if mask.shape != shape:
        raise ValidationError(f"mask {path} has shape {mask.shape}, expected {shape}")
    return mask


def _write_map(path, values):
    """``.npy`` keeps raw floats, ``.hdr``/``.exr`` float images, anything else 8-bit display."""
    path = Path(path)
    if path.suffix == ".npy":
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, values)
    elif path.suffix in (".hdr", ".exr"):
        scene.write_env(path, values)
    else:
        scene.write_ldr(path, values)


def _load_split(manifest, split, size):
    index = scene.load_dataset_manifest(manifest)
    ids = index.ids(split)
    if not ids:
        raise ValidationError(f"{manifest}: no records in split {split!r}")
    return [scene.load_sample(index, i, size) for i in ids]


def _print_json(payload):
    print(json.dumps(payload, sort_keys=True))


# --------------------------------------------------------------------------
# commands


def cmd_decompose(args):
    cfg = _load_config(args)
    torch.manual_seed(cfg.seed)
    meta = read_sidecar(args.checkpoint)
    if meta.get("network") != "irn":
        raise ValidationError(f"{args.checkpoint} is a {meta.get('network')} checkpoint, expected irn")
    irn, _ = load_checkpoint(args.checkpoint)
    rar = None
    if args.rar:
        rar, rar_meta = load_checkpoint(args.rar)
        if rar_meta.get("network") != "rar":
            raise ValidationError(f"{args.rar} is a {rar_meta.get('network')} checkpoint, expected rar")
    size = (irn.cfg.height, irn.cfg.width)
    image = scene.read_rgb(args.image)
    if image.shape[:2] != size:
        image = cv2.resize(image, size[::-1], interpolation=cv2.INTER_LINEAR)
    image = np.clip(image, 0.0, None)
    out = training.decompose(irn, image, rar)
    d = Path(args.out_dir)
    scene.write_ldr(d / "albedo.png", out["albedo"])
    scene.write_normals(d / "normal.png", out["normal"])
    scene.write_env(d / "env.hdr", out["env"])
    scene.write_ldr(d / "direct.png", out["direct"])
    # signed residual stored with an offset: value = (residual + 1) / 2
    scene.write_png16(d / "residual.png", (out["residual"] + 1.0) / 2.0)
    scene.write_ldr(d / "recon.png", np.clip(out["direct"] + out["residual"], 0.0, 1.0))
    _print_json({"out_dir": str(d), "files": sorted(p.name for p in d.glob("*.png")) + ["env.hdr"]})
    return 0


def cmd_render(args):
    cfg = _load_config(args)
    albedo = scene.read_rgb(args.albedo)
    normal = _read_normals(args.normal)
    env = scene.read_env(args.env)
    mask = _read_mask(args.mask, albedo.shape[:2])
    image = shade_direct(albedo, normal, env, _weighting(args, cfg), mask)
    _write_map(args.out, image)
    _print_json({"out": str(args.out), "mean": float(image[mask].mean()) if mask.any() else 0.0})
    return 0


def cmd_probe(args):
    cfg = _load_config(args)
    image, mask = render_probe(scene.read_env(args.env), args.resolution, _weighting(args, cfg))
    _write_map(args.out, image)
    _print_json({"out": str(args.out), "resolution": args.resolution, "max": float(image.max())})
    return 0


def cmd_fit_env(args):
    cfg = _load_config(args)
    image = scene.read_rgb(args.image)
    albedo = scene.read_rgb(args.albedo)
    normal = _read_normals(args.normal)
    mask = _read_mask(args.mask, image.shape[:2])
    fit = fit_env_least_squares(image, albedo, normal, _weighting(args, cfg), mask, solver=args.solver)
    scene.write_env(args.out, fit.env)
    _print_json({"out": str(args.out), "residual": fit.residual, "uncovered_cells": int(fit.uncovered.sum())})
    return 0


def cmd_train(args):
    cfg = training.smoke_config() if args.preset == "smoke" else training.TrainConfig()
    if args.config:
        cfg = training.TrainConfig.from_file(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if args.steps is not None:
        cfg = cfg.with_overrides(steps={**cfg.steps, args.stage: args.steps})
    run = training.RunDir(args.run_dir)
    training.check_prerequisites(run, args.stage)

    size = (cfg.model.height, cfg.model.width)
    if args.preset == "smoke":
        data = training.smoke_data(cfg)
        synthetic, real, envs = data["synthetic"], data["real"], data["envs"]
    else:
        synthetic = real = envs = None

    def need(attr, what):
        value = getattr(cfg.data, attr)
        if not value:
            raise ValidationError(f"stage {args.stage} needs [data] {attr} ({what}) in the config")
        # relative data paths are resolved against the config file's directory
        return Path(args.config).parent / value if args.config else Path(value)

    if synthetic is None and args.stage in ("env_a", "env_b", "irn_syn", "rar_syn"):
        synthetic = _load_split(need("manifest", "synthetic manifest"), cfg.data.split, size)
    if real is None and args.stage.startswith("irn_real"):
        real = _load_split(need("real_manifest", "real-image manifest"), cfg.data.split, size)
    if envs is None and args.stage == "env_a":
        envs = training.load_env_dir(need("env_dir", "indoor environment maps"))

    stage = args.stage
    if stage == "env_a":
        res = training.train_env_stage_a(envs, synthetic, cfg, run)
    elif stage == "env_b":
        res = training.train_env_stage_b(synthetic, cfg, run)
    elif stage == "irn_syn":
        res = training.train_irn_synthetic(synthetic, cfg, run)
    elif stage == "rar_syn":
        res = training.train_rar_synthetic(synthetic, cfg, run)
    else:
        res = training.finetune_irn_real(real, "IIW" if stage == "irn_real_iiw" else "NYU", cfg, run)
    _print_json({
        "stage": stage,
        "initial_objective": res.initial_objective,
        "final_objective": res.final_objective,
        "reduction": res.reduction,
        "checkpoints": {k: str(v) for k, v in res.checkpoints.items()},
    })
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    if not names:
        raise ValidationError("--metrics is empty")
    unknown = set(names) - set(training.METRIC_NAMES)
    if unknown:
        raise ValidationError(f"unknown metrics {sorted(unknown)}; choose from {', '.join(training.METRIC_NAMES)}")
    meta = read_sidecar(args.checkpoint)
    size = (meta["model"]["height"], meta["model"]["width"])
    samples = _load_split(args.dataset, args.split, size)
    reports = training.evaluate(args.checkpoint, samples, names, args.out, cfg.loss)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "index", "value"])
            for r in reports:
                for i, v in enumerate(r.per_sample):
                    writer.writerow([r.name, i, repr(float(v))])
    _print_json({r.name: r.value for r in reports})
    return 0


def cmd_gen_analytic(args):
    cfg = _load_config(args)
    samples = scene.analytic_fixtures(
        args.count, cfg.seed, args.height, args.width, shadows=args.shadows,
        shadow_strength=args.shadow_strength, judgments=args.judgments, prefix=args.prefix,
    )
    manifest = scene.write_dataset(samples, args.out_dir, args.split)
    if args.envs:
        rng = np.random.default_rng(cfg.seed + 1)
        env_dir = Path(args.out_dir) / "envs"
        for i in range(args.envs):
            scene.write_env(env_dir / f"env{i:03d}.npy", scene.random_indoor_env(rng))
    _print_json({"manifest": str(manifest), "count": len(samples)})
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    common.add_argument("--config", default=None, help="TOML or JSON training config")
    common.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")

    parser = _Parser(prog="invrender", description="Single-image inverse rendering toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    def weighting(p):
        p.add_argument("--weighting", choices=WEIGHTINGS, default=None,
                       help="direction weights of the renderer (default: config value)")

    p = add("decompose", cmd_decompose, "Split an image into albedo, normals, lighting and residual.")
    p.add_argument("--image", required=True, help="input image")
    p.add_argument("--checkpoint", required=True, help="IRN checkpoint")
    p.add_argument("--rar", default=None, help="optional RAR checkpoint for the residual")
    p.add_argument("--out-dir", required=True, help="directory for the six output files")

    p = add("render", cmd_render, "Direct-render albedo and normals under an environment map.")
    p.add_argument("--albedo", required=True)
    p.add_argument("--normal", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--out", required=True, help=".npy, .hdr/.exr or an 8-bit image format")
    weighting(p)

    p = add("probe", cmd_probe, "Render a white diffuse ball under an environment map.")
    p.add_argument("--env", required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", required=True)
    weighting(p)

    p = add("fit-env", cmd_fit_env, "Least-squares nonnegative lighting for known albedo and normals.")
    p.add_argument("--image", required=True)
    p.add_argument("--albedo", required=True)
    p.add_argument("--normal", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--out", required=True, help="environment map file (.hdr, .exr or .npy)")
    p.add_argument("--solver", choices=("active_set", "projected_gradient"), default="active_set")
    weighting(p)

    p = add("train", cmd_train, "Run one training stage.")
    p.add_argument("--stage", required=True, choices=training.STAGES)
    p.add_argument("--run-dir", default="runs/default", help="checkpoints, caches and logs")
    p.add_argument("--preset", choices=("none", "smoke"), default="none",
                   help="'smoke' uses the desk-scale config and generated fixtures")
    p.add_argument("--steps", type=int, default=None, help="override the stage step budget")

    p = add("eval", cmd_eval, "Evaluate an IRN checkpoint on a dataset and write a JSON report.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset manifest (JSON lines)")
    p.add_argument("--metrics", required=True, help=f"comma list from {', '.join(training.METRIC_NAMES)}")
    p.add_argument("--split", default="test", choices=scene.SPLITS)
    p.add_argument("--out", default="report.json")
    p.add_argument("--csv", default=None, help="optional per-sample CSV")

    p = add("gen-analytic", cmd_gen_analytic, "Write analytic fixtures with exact ground truth.")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--height", type=int, default=scene.IMAGE_SIZE[0])
    p.add_argument("--width", type=int, default=scene.IMAGE_SIZE[1])
    p.add_argument("--shadows", action="store_true", help="multiply cast shadows into the images")
    p.add_argument("--shadow-strength", type=float, default=0.5)
    p.add_argument("--judgments", type=int, default=0, help="reflectance judgments per sample")
    p.add_argument("--split", default="train", choices=scene.SPLITS)
    p.add_argument("--prefix", default="fx")
    p.add_argument("--envs", type=int, default=0, help="also write this many indoor env maps to OUT/envs")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvRenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataIOError.exit_code
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
