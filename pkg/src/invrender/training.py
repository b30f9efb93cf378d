"""Staged training: env estimator, supervised IRN, RAR, real-data fine-tuning.

Every stage reads and writes inside a run directory::

    run/
      checkpoints/<stage>/<net>_step000500.pt (+ .json sidecar)
      cache/env_targets/   per-sample target lighting from stage env_b
      cache/pseudo/        frozen-IRN targets for real-data fine-tuning
      logs/<stage>.jsonl   one JSON object per step

Stages refuse to start when their prerequisites are missing.
"""

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from invrender import metrics
from invrender.errors import DataIOError, InvRenderError, NumericError, StageGateError, ValidationError
from invrender.grid import EnvironmentMap
from invrender.losses import (
    LossConfig,
    composite_real_loss,
    masked_l1,
    normal_supervision_loss,
    pseudo_supervision_loss,
    reconstruction_loss,
    supervised_loss,
    whdr_hinge_loss,
)
from invrender.models import (
    ModelConfig,
    build_network,
    load_checkpoint,
    param_hash,
    read_sidecar,
    save_checkpoint,
)
from invrender.render import shade_direct_torch

log = logging.getLogger(__name__)

STAGES = ("env_a", "env_b", "irn_syn", "rar_syn", "irn_real_iiw", "irn_real_nyu")
DEFAULT_STEPS = {
    "env_a": 2000,
    "env_b": 1000,
    "irn_syn": 3000,
    "rar_syn": 2000,
    "irn_real_iiw": 1000,
    "irn_real_nyu": 1000,
}


class FreezeViolation(InvRenderError):
    """A frozen parameter set or cache changed during fine-tuning."""

    exit_code = 3


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    schedule: str = "constant"  # or "cosine": anneal to zero over the stage budget
    warmup: int = 0  # steps of linear ramp from lr/warmup up to lr

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValidationError(f"unknown learning-rate schedule {self.schedule!r}")
        if not self.lr > 0:
            raise ValidationError("learning rate must be positive")
        if self.warmup < 0:
            raise ValidationError("warmup must be non-negative")

    def factor(self, step, total):
        """Multiplier on ``lr`` at 0-based ``step`` of a ``total``-step stage."""
        if step < self.warmup:
            return (step + 1) / self.warmup
        if self.schedule == "cosine":
            span = max(total - self.warmup, 1)
            return 0.5 * (1.0 + math.cos(math.pi * (step - self.warmup) / span))
        return 1.0


@dataclass(frozen=True)
class DataConfig:
    manifest: str = None
    real_manifest: str = None
    env_dir: str = None
    split: str = "train"
    batch_size: int = 4
    env_pairs: int = 8  # env_a: distinct indoor maps each scene is rendered under


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    data: DataConfig = DataConfig()
    steps: dict = field(default_factory=lambda: dict(DEFAULT_STEPS))
    seed: int = 0
    checkpoint_every: int = 500
    keep_last: int = 2
    use_rar: bool = True

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **kw):
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        sections = {"model": ModelConfig, "loss": LossConfig, "optimizer": OptimizerConfig, "data": DataConfig}
        kwargs = {}
        for name, klass in sections.items():
            if name in raw:
                kwargs[name] = _build(klass, raw.pop(name), name)
        stage = raw.pop("stage", {})
        known = {f.name for f in fields(cls)} - set(sections)
        for key, value in {**stage, **raw}.items():
            if key not in known:
                raise ValidationError(f"unknown config key {key!r}")
            kwargs[key] = value
        if "steps" in kwargs:
            bad = set(kwargs["steps"]) - set(STAGES)
            if bad:
                raise ValidationError(f"unknown stages in steps: {sorted(bad)}")
            kwargs["steps"] = {**DEFAULT_STEPS, **kwargs["steps"]}
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        if not path.exists():
            raise DataIOError(f"config not found: {path}")
        text = path.read_text()
        try:
            raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
            raise ValidationError(f"{path}: {exc}") from None
        return cls.from_dict(raw)


def _build(klass, values, section):
    names = {f.name for f in fields(klass)}
    unknown = set(values) - names
    if unknown:
        raise ValidationError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return klass(**values)


def smoke_config(seed=0, **overrides):
    """Desk-scale configuration used by the smoke and acceptance tests.

    Same topology as the full model at 1/4 width with four residual blocks
    and 64x80 input. The light head downsamples once instead of three times,
    so its map before the resize is 8x10 as in the full model. A short warmup
    keeps fine-tuning from wrecking pretrained weights on the first Adam
    steps, and the cosine decay gets past the plateau of a constant rate.
    """
    cfg = TrainConfig(
        model=ModelConfig(height=64, width=80, base_channels=16, res_blocks=4, light_strides=1),
        optimizer=OptimizerConfig(lr=2e-3, schedule="cosine", warmup=50),
        data=DataConfig(batch_size=8),
        steps={
            "env_a": 400,
            "env_b": 400,
            "irn_syn": 300,
            "rar_syn": 1000,
            "irn_real_iiw": 200,
            "irn_real_nyu": 700,
        },
        seed=seed,
        checkpoint_every=100,
    )
    return replace(cfg, **overrides)


SMOKE_SHARPNESS = (2.0, 5.0)
SMOKE_SHADOW = 0.3


def smoke_data(cfg, count=8, seed=1, judgments=60):
    """Analytic fixtures for a desk-scale run of all stages.

    Returns a dict with ``synthetic`` (cast shadows, full ground truth),
    ``real`` (cast shadows plus judgments, from a different seed) and
    ``envs`` (indoor maps for stage env_a). Lighting is broad so an 8x10
    light map can express it.
    """
    from invrender.scene import analytic_fixtures, random_indoor_env

    h, w = cfg.model.height, cfg.model.width
    common = dict(height=h, width=w, shadows=True, shadow_strength=SMOKE_SHADOW, sharpness=SMOKE_SHARPNESS)
    synthetic = analytic_fixtures(count, seed=seed, prefix="syn", **common)
    real = analytic_fixtures(count, seed=seed + 1, judgments=judgments, prefix="real", **common)
    rng = np.random.default_rng(seed + 2)
    envs = [random_indoor_env(rng, sharpness=SMOKE_SHARPNESS) for _ in range(count)]
    return {"synthetic": synthetic, "real": real, "envs": envs}


# --------------------------------------------------------------------------
# tensors


@dataclass
class TensorSet:
    ids: list
    image: torch.Tensor
    mask: torch.Tensor
    albedo: torch.Tensor = None
    normal: torch.Tensor = None
    env: torch.Tensor = None
    judgments: list = None
    direct: torch.Tensor = None

    def __len__(self):
        return len(self.ids)

    def take(self, idx):
        idx = list(idx)

        def pick(t):
            return None if t is None else t[idx]

        return TensorSet(
            [self.ids[i] for i in idx],
            self.image[idx],
            self.mask[idx],
            pick(self.albedo),
            pick(self.normal),
            pick(self.env),
            None if self.judgments is None else [self.judgments[i] for i in idx],
            pick(self.direct),
        )


def _chw(a):
    return torch.as_tensor(np.ascontiguousarray(np.moveaxis(a, -1, 0)), dtype=torch.float32)


def to_tensors(samples, require=()):
    """Stack samples into NCHW float32 tensors; optional fields only if all have them."""
    if not samples:
        raise ValidationError("no samples")
    for name in require:
        missing = [s.id for s in samples if getattr(s, name) is None]
        if missing:
            raise ValidationError(f"samples without {name}: {missing[:5]}")

    def stack(name, conv):
        vals = [getattr(s, name) for s in samples]
        if any(v is None for v in vals):
            return None
        return torch.stack([conv(v) for v in vals])

    return TensorSet(
        [s.id for s in samples],
        torch.stack([_chw(s.image) for s in samples]),
        torch.stack([torch.as_tensor(s.mask, dtype=torch.float32)[None] for s in samples]),
        stack("albedo", _chw),
        stack("normal", _chw),
        stack("env", lambda e: _chw(e.radiance)),
        [s.judgments for s in samples] if all(s.judgments for s in samples) else None,
    )


def env_from_tensor(t):
    return EnvironmentMap(t.detach().double().cpu().numpy().transpose(1, 2, 0))


def hwc(t):
    return t.detach().double().cpu().numpy().transpose(1, 2, 0)


# --------------------------------------------------------------------------
# run directory


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    def stage_dir(self, stage):
        return self.root / "checkpoints" / stage

    def checkpoint_path(self, stage, kind, step):
        return self.stage_dir(stage) / f"{kind}_step{step:06d}.pt"

    def checkpoints(self, stage, kind):
        return sorted(self.stage_dir(stage).glob(f"{kind}_step*.pt"))

    def latest(self, stage, kind):
        found = self.checkpoints(stage, kind)
        return found[-1] if found else None

    def require(self, stage, kind):
        path = self.latest(stage, kind)
        if path is None:
            raise StageGateError(
                f"missing prerequisite checkpoint: {self.stage_dir(stage) / (kind + '_step*.pt')} "
                f"(run stage {stage} first)"
            )
        return path

    @property
    def env_cache(self):
        return self.root / "cache" / "env_targets"

    @property
    def pseudo_cache(self):
        return self.root / "cache" / "pseudo"

    def log_path(self, stage):
        return self.root / "logs" / f"{stage}.jsonl"


def _dir_digest(path):
    h = hashlib.sha256()
    for f in sorted(Path(path).rglob("*")):
        if f.is_file():
            h.update(f.relative_to(path).as_posix().encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def write_env_cache(run, targets, config_hash):
    run.env_cache.mkdir(parents=True, exist_ok=True)
    for sid, env in targets.items():
        np.save(run.env_cache / f"{sid}.npy", env.radiance)
    (run.env_cache / "index.json").write_text(
        json.dumps({"config_hash": config_hash, "ids": sorted(targets)}, indent=1)
    )


def read_env_cache(run, ids):
    index = run.env_cache / "index.json"
    if not index.exists():
        raise StageGateError(f"missing target-lighting cache {index} (run stage env_b first)")
    meta = json.loads(index.read_text())
    missing = [i for i in ids if i not in meta["ids"]]
    if missing:
        raise StageGateError(f"target-lighting cache has no entry for {missing[:5]}")
    return {i: EnvironmentMap(np.load(run.env_cache / f"{i}.npy")) for i in ids}


def check_prerequisites(run, stage):
    """Raise StageGateError naming the first missing artifact ``stage`` needs."""
    run = RunDir(run) if not isinstance(run, RunDir) else run
    if stage not in STAGES:
        raise ValidationError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    if stage == "env_b":
        run.require("env_a", "env")
    if stage in ("irn_syn", "rar_syn") and not (run.env_cache / "index.json").exists():
        raise StageGateError(f"missing target-lighting cache {run.env_cache / 'index.json'} (run stage env_b first)")
    if stage in ("rar_syn", "irn_real_iiw", "irn_real_nyu"):
        run.require("irn_syn", "irn")
    if stage.startswith("irn_real"):
        run.require("rar_syn", "rar")


# --------------------------------------------------------------------------
# generic loop


@dataclass
class StageResult:
    stage: str
    losses: list
    initial_objective: float
    final_objective: float
    checkpoints: dict
    extras: dict = field(default_factory=dict)

    @property
    def reduction(self):
        if self.initial_objective <= 0:
            return 0.0
        return 1.0 - self.final_objective / self.initial_objective


def _batches(n, batch_size, seed):
    """Endless deterministic stream of index batches (reshuffled per epoch)."""
    gen = torch.Generator().manual_seed(seed)
    batch_size = min(batch_size, n)
    while True:
        perm = torch.randperm(n, generator=gen).tolist()
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


def full_objective(modules, objective, data, batch_size):
    """Objective over the whole set in fixed order without touching BN buffers."""
    snapshot = [copy.deepcopy(m.state_dict()) for m in modules]
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            part = data.take(range(start, min(start + batch_size, len(data))))
            loss, _ = objective(part)
            total += float(loss) * len(part)
            count += len(part)
    for m, s in zip(modules, snapshot):
        m.load_state_dict(s)
    return total / count


def _fit(stage, trained, objective, data, cfg, run, steps, extra_modules=(), sidecar_extra=None):
    """Adam over ``trained`` (dict kind -> module) minimising ``objective``."""
    if steps < 1:
        raise ValidationError(f"{stage}: step budget must be positive")
    modules = list(trained.values())
    for m in modules:
        m.train()
    for m in extra_modules:
        m.eval()
    params = [p for m in modules for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.optimizer.lr, betas=(cfg.optimizer.beta1, cfg.optimizer.beta2))
    sched = None
    if cfg.optimizer.schedule != "constant" or cfg.optimizer.warmup:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: cfg.optimizer.factor(i, steps))
    bs = cfg.data.batch_size
    initial = full_objective(modules, objective, data, bs)

    log_path = run.log_path(stage)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    saved = {k: [] for k in trained}

    def checkpoint(step, extra=None):
        for kind, m in trained.items():
            path = save_checkpoint(m, run.checkpoint_path(stage, kind, step), stage, digest,
                                   cfg.seed, step, kind, {**(sidecar_extra or {}), **(extra or {})})
            saved[kind].append(path)
            while len(saved[kind]) > cfg.keep_last:
                old = saved[kind].pop(0)
                old.unlink(missing_ok=True)
                old.with_suffix(".json").unlink(missing_ok=True)

    losses = []
    batches = _batches(len(data), bs, cfg.seed)
    with open(log_path, "w") as logf:
        for step in range(steps):
            batch = data.take(next(batches))
            loss, terms = objective(batch)
            value = float(loss.detach())
            if not math.isfinite(value):
                checkpoint(step, {"aborted": True})
                raise NumericError(f"{stage}: non-finite loss at step {step}; last good checkpoint saved")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            losses.append(value)
            record = {"step": step, "stage": stage, "loss": value}
            record.update({k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()})
            logf.write(json.dumps(record) + "\n")
            if (step + 1) % cfg.checkpoint_every == 0 and step + 1 < steps:
                checkpoint(step + 1)
    checkpoint(steps)
    final = full_objective(modules, objective, data, bs)
    log.info("%s: objective %.5g -> %.5g over %d steps", stage, initial, final, steps)
    return StageResult(stage, losses, initial, final, {k: v[-1] for k, v in saved.items()})


def _seed_all(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


# --------------------------------------------------------------------------
# stages


def load_env_dir(path):
    """All environment maps (``.npy`` / ``.hdr`` / ``.exr``) in a directory, sorted."""
    from invrender.scene import read_env

    path = Path(path)
    if not path.is_dir():
        raise DataIOError(f"environment map directory not found: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix in (".npy", ".hdr", ".exr"))
    return [read_env(p) for p in files]


def train_env_stage_a(envs, scenes, cfg, run):
    """Pretrain the env estimator on direct renders under sampled indoor lighting."""
    run = RunDir(run) if not isinstance(run, RunDir) else run
    if not envs:
        raise ValidationError("env_a: no indoor environment maps supplied")
    _seed_all(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if cfg.data.env_pairs < 1:
        raise ValidationError("env_a: env_pairs must be at least 1")
    k = min(cfg.data.env_pairs, len(envs))
    picks = np.stack([rng.choice(len(envs), size=k, replace=False) for _ in scenes])
    base = to_tensors(scenes, require=("albedo", "normal")).take(np.repeat(np.arange(len(scenes)), k))
    target = torch.stack([_chw(envs[i].radiance) for i in picks.ravel()])
    with torch.no_grad():
        image = shade_direct_torch(base.albedo, base.normal, target, cfg.loss.weighting, base.mask)
    data = replace(base, image=image, env=target)

    net = build_network("env", cfg.model, cfg.seed)

    def objective(b):
        pred = net(b.image, b.albedo, b.normal)
        loss = masked_l1(pred, b.env)
        return loss, {"env_l1": loss}

    res = _fit("env_a", {"env": net}, objective, data, cfg, run, cfg.steps["env_a"])
    res.extras["env_picks"] = picks.tolist()
    return res


def train_env_stage_b(samples, cfg, run):
    """Fine-tune the env estimator by direct-render reconstruction; cache targets."""
    run = RunDir(run) if not isinstance(run, RunDir) else run
    prior = run.require("env_a", "env")
    usable = [s for s in samples if s.albedo is not None and s.normal is not None]
    for s in samples:
        if s.albedo is None or s.normal is None:
            log.warning("env_b: skipping %s (no ground-truth albedo/normal)", s.id)
    if not usable:
        raise ValidationError("env_b: no samples with ground-truth albedo and normals")
    _seed_all(cfg.seed)
    net, _ = load_checkpoint(prior)
    data = to_tensors(usable)
    w = cfg.loss.weighting

    def objective(b):
        pred = net(b.image, b.albedo, b.normal)
        loss = masked_l1(shade_direct_torch(b.albedo, b.normal, pred, w, b.mask), b.image, b.mask)
        return loss, {"recon": loss}

    res = _fit("env_b", {"env": net}, objective, data, cfg, run, cfg.steps["env_b"])
    targets = predict_env_targets(net, data)
    write_env_cache(run, targets, cfg.digest())
    res.extras["targets"] = targets
    res.extras["skipped"] = sorted({s.id for s in samples} - {s.id for s in usable})
    return res


def predict_env_targets(net, data):
    net.eval()
    out = {}
    with torch.no_grad():
        for i in range(len(data)):
            part = data.take([i])
            out[part.ids[0]] = env_from_tensor(net(part.image, part.albedo, part.normal)[0])
    return out


def train_irn_synthetic(samples, cfg, run):
    """Supervised IRN training against ground truth and cached target lighting."""
    run = RunDir(run) if not isinstance(run, RunDir) else run
    targets = read_env_cache(run, [s.id for s in samples])
    _seed_all(cfg.seed)
    data = to_tensors(samples, require=("albedo", "normal"))
    data.env = torch.stack([_chw(targets[i].radiance) for i in data.ids])
    net = build_network("irn", cfg.model, cfg.seed)

    def objective(b):
        return supervised_loss(net(b.image), (b.albedo, b.normal, b.env), b.mask, cfg.loss)

    res = _fit("irn_syn", {"irn": net}, objective, data, cfg, run, cfg.steps["irn_syn"])
    reports = evaluate_network(net, samples, ("angular", "albedo", "recon"), cfg.loss)
    report_path = run.stage_dir("irn_syn") / "train_metrics.json"
    report_path.write_text(json.dumps(report_payload(reports, cfg.digest()), indent=1, sort_keys=True))
    res.extras["metrics"] = reports
    return res


def train_rar_synthetic(samples, cfg, run):
    """Train RAR to explain what the direct render of ground truth misses."""
    run = RunDir(run) if not isinstance(run, RunDir) else run
    run.require("irn_syn", "irn")
    targets = read_env_cache(run, [s.id for s in samples])
    _seed_all(cfg.seed)
    data = to_tensors(samples, require=("albedo", "normal"))
    env = torch.stack([_chw(targets[i].radiance) for i in data.ids])
    with torch.no_grad():
        data.direct = shade_direct_torch(data.albedo, data.normal, env, cfg.loss.weighting, data.mask)
    net = build_network("rar", cfg.model, cfg.seed)

    def objective(b):
        residual = net(b.image, b.albedo, b.normal)
        loss = reconstruction_loss(b.image, b.direct, residual, b.mask)
        return loss, {"recon": loss}

    return _fit("rar_syn", {"rar": net}, objective, data, cfg, run, cfg.steps["rar_syn"])


@dataclass
class PseudoTargets:
    albedo: torch.Tensor
    normal: torch.Tensor
    env: torch.Tensor
    config_hash: str


def compute_pseudo_targets(run, frozen_irn, data, checkpoint_path):
    """Frozen-IRN outputs per image, cached under ``cache/pseudo`` by id + config hash."""
    side = read_sidecar(checkpoint_path)
    key = hashlib.sha256(f"{side['config_hash']}:{side['step']}".encode()).hexdigest()[:16]
    run.pseudo_cache.mkdir(parents=True, exist_ok=True)
    out = {"albedo": [], "normal": [], "env": []}
    frozen_irn.eval()
    for i, sid in enumerate(data.ids):
        path = run.pseudo_cache / f"{sid}.{key}.pt"
        if path.exists():
            cached = torch.load(path, weights_only=True)
        else:
            with torch.no_grad():
                a, n, e = frozen_irn(data.image[i:i + 1])
            cached = {"albedo": a[0], "normal": n[0], "env": e[0]}
            torch.save(cached, path)
        for k in out:
            out[k].append(cached[k])
    return PseudoTargets(*(torch.stack(out[k]) for k in ("albedo", "normal", "env")), key)


def finetune_irn_real(samples, mode, cfg, run):
    """Fine-tune IRN on real images with RAR frozen.

    ``mode="IIW"`` uses reflectance judgments as weak supervision, ``"NYU"``
    uses ground-truth normals. With ``cfg.use_rar`` False the reconstruction
    term drops the residual image.
    """
    run = RunDir(run) if not isinstance(run, RunDir) else run
    if mode not in ("IIW", "NYU"):
        raise ValidationError(f"unknown fine-tuning mode {mode!r}")
    stage = f"irn_real_{mode.lower()}"
    irn_path = run.require("irn_syn", "irn")
    rar_path = run.require("rar_syn", "rar")
    if mode == "IIW":
        usable = [s for s in samples if s.judgments]
    else:
        usable = [s for s in samples if s.normal is not None]
    usable_ids = {s.id for s in usable}
    for s in samples:
        if s.id not in usable_ids:
            log.warning("%s: skipping %s (no %s supervision)", stage, s.id,
                        "judgments" if mode == "IIW" else "normals")
    if not usable:
        raise ValidationError(f"{stage}: no samples carry {mode} supervision")
    _seed_all(cfg.seed)
    data = to_tensors(usable)
    if mode == "IIW":
        data.judgments = [s.judgments for s in usable]

    net, _ = load_checkpoint(irn_path)
    frozen, _ = load_checkpoint(irn_path)
    rar, _ = load_checkpoint(rar_path)
    for p in list(rar.parameters()) + list(frozen.parameters()):
        p.requires_grad_(False)
    pseudo = compute_pseudo_targets(run, frozen, data, irn_path)
    index = {sid: i for i, sid in enumerate(data.ids)}
    rar_before = param_hash(rar)
    cache_before = _dir_digest(run.pseudo_cache)
    w = cfg.loss.weighting

    def objective(b):
        idx = [index[i] for i in b.ids]
        albedo, normal, env = net(b.image)
        la, ln, le = pseudo_supervision_loss(
            (albedo, normal, env),
            (pseudo.albedo[idx], pseudo.normal[idx], pseudo.env[idx]),
            b.mask,
        )
        direct = shade_direct_torch(albedo, normal, env, w, b.mask)
        residual = rar(b.image, albedo, normal) * b.mask if cfg.use_rar else None
        lu = reconstruction_loss(b.image, direct, residual, b.mask)
        if mode == "IIW":
            lw, _ = whdr_hinge_loss(albedo, b.judgments, b.mask, cfg.loss)
        else:
            lw = normal_supervision_loss(normal, b.normal, b.mask)
        terms = {"L_a": la, "L_n": ln, "L_e": le, "L_u": lu, "L_w": lw}
        return composite_real_loss(terms, mode, cfg.loss), terms

    res = _fit(stage, {"irn": net}, objective, data, cfg, run, cfg.steps[stage],
               extra_modules=(rar,), sidecar_extra={"mode": mode, "use_rar": cfg.use_rar})
    if param_hash(rar) != rar_before:
        raise FreezeViolation("RAR parameters changed during real-data fine-tuning")
    if _dir_digest(run.pseudo_cache) != cache_before:
        raise FreezeViolation("pseudo-target cache changed during real-data fine-tuning")
    res.extras["rar_hash"] = rar_before
    return res


# --------------------------------------------------------------------------
# inference and evaluation

METRIC_NAMES = ("whdr", "angular", "albedo", "env", "recon")


def decompose(irn, image, rar=None):
    """Run IRN (and RAR if given) on one ``(H, W, 3)`` image.

    Returns numpy ``albedo``, ``normal``, ``env`` (EnvironmentMap), ``direct``
    and ``residual`` (zeros without RAR).
    """
    irn.eval()
    x = _chw(image)[None]
    with torch.no_grad():
        a, n, e = irn(x)
        direct = shade_direct_torch(a, n, e)
        residual = rar.eval()(x, a, n) if rar is not None else torch.zeros_like(direct)
    return {
        "albedo": hwc(a[0]),
        "normal": hwc(n[0]),
        "env": env_from_tensor(e[0]),
        "direct": hwc(direct[0]),
        "residual": hwc(residual[0]),
    }


def _present(value):
    if value is None:
        return False
    return len(value) > 0 if isinstance(value, list) else True


def _needs(metric):
    return {"whdr": "judgments", "angular": "normal", "albedo": "albedo", "env": "env"}.get(metric)


def evaluate_network(irn, samples, metric_names, loss_cfg=LossConfig()):
    """Apply the requested metrics to IRN predictions; returns MetricReports."""
    unknown = set(metric_names) - set(METRIC_NAMES)
    if unknown:
        raise ValidationError(f"unknown metrics: {sorted(unknown)}")
    for name in metric_names:
        field_name = _needs(name)
        if field_name and not any(_present(getattr(s, field_name)) for s in samples):
            raise ValidationError(f"metric {name!r} needs {field_name}, which the dataset lacks")
    irn.eval()
    per = {k: [] for k in ("whdr", "angular", "albedo_rmse", "albedo_mad", "env", "recon")}
    pooled_angles = []
    used = set()
    for s in samples:
        with torch.no_grad():
            a, n, e = irn(_chw(s.image)[None])
        albedo, normal, env = hwc(a[0]), hwc(n[0]), env_from_tensor(e[0])
        if "whdr" in metric_names and s.judgments:
            per["whdr"].append(metrics.whdr(albedo, s.judgments, loss_cfg.delta, s.mask,
                                            loss_cfg.patch_radius))
            used.add(s.id)
        if "angular" in metric_names and s.normal is not None:
            angles = metrics.angular_errors(normal, s.normal, s.mask)
            pooled_angles.append(angles)
            per["angular"].append(float(np.median(angles)))
            used.add(s.id)
        if "albedo" in metric_names and s.albedo is not None:
            rmse, mad = metrics.rmse_mad(albedo, s.albedo, s.mask)
            per["albedo_rmse"].append(rmse)
            per["albedo_mad"].append(mad)
            used.add(s.id)
        if "env" in metric_names and s.env is not None:
            per["env"].append(metrics.env_map_error(env, s.env))
            used.add(s.id)
        if "recon" in metric_names:
            per["recon"].append(metrics.image_recon_error(s.image, albedo, normal, env, s.mask,
                                                          loss_cfg.weighting))
            used.add(s.id)
    reports = []
    units = {"whdr": "percent", "angular": "degrees", "albedo_rmse": "albedo", "albedo_mad": "albedo",
             "env": "radiance", "recon": "radiance"}
    for key, vals in per.items():
        if not vals:
            continue
        if key == "angular":
            value = float(np.median(np.concatenate(pooled_angles)))
        else:
            value = float(np.mean(vals))
        reports.append(metrics.MetricReport(key, value, units[key], len(vals), vals))
    if not reports:
        raise ValidationError("no sample supports the requested metrics")
    return reports


def report_payload(reports, config_hash):
    payload = {r.name: r.value for r in reports}
    payload["n"] = max(r.sample_count for r in reports)
    payload["config"] = config_hash
    payload["per_sample"] = {r.name: r.per_sample for r in reports}
    return payload


def evaluate(checkpoint, samples, metric_names, out_path=None, loss_cfg=LossConfig()):
    """Evaluate an IRN checkpoint (stage irn_syn or later) and write a JSON report."""
    meta = read_sidecar(checkpoint)
    if meta.get("network") != "irn" or meta.get("stage") not in ("irn_syn", "irn_real_iiw", "irn_real_nyu"):
        raise ValidationError(f"{checkpoint} is not an IRN checkpoint from stage irn_syn or later")
    irn, _ = load_checkpoint(checkpoint)
    reports = evaluate_network(irn, samples, metric_names, loss_cfg)
    if out_path is not None:
        payload = report_payload(reports, meta["config_hash"])
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(payload, indent=1, sort_keys=True))
    return reports
