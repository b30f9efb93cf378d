"""Training objectives.

Tensors are NCHW: maps are ``(B, 3, H, W)``, masks ``(B, 1, H, W)`` and
environment maps ``(B, 3, R, C)``. Every L1 term is a masked mean over valid
pixels and channels.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from invrender.errors import ShapeError, ValidationError
from invrender.metrics import LUMA
from invrender.render import shade_direct_torch
from invrender.scene import Relation

IIW_WEIGHTS = {"L_a": 0.5, "L_n": 0.5, "L_e": 0.1, "L_u": 1.0, "L_w": 30.0}
NYU_WEIGHTS = {"L_a": 0.2, "L_e": 0.05, "L_u": 1.0, "L_w": 20.0}


@dataclass(frozen=True)
class LossConfig:
    normal_weight: float = 1.0
    albedo_weight: float = 1.0
    lighting_weight: float = 0.5
    delta: float = 0.10
    patch_radius: int = 1
    albedo_floor: float = 1e-4
    weighting: str = "literal_sum"
    iiw_weights: dict = field(default_factory=lambda: dict(IIW_WEIGHTS))
    nyu_weights: dict = field(default_factory=lambda: dict(NYU_WEIGHTS))

    def __post_init__(self):
        scalars = (self.normal_weight, self.albedo_weight, self.lighting_weight)
        weights = list(self.iiw_weights.values()) + list(self.nyu_weights.values())
        if any(w < 0 for w in (*scalars, *weights)):
            raise ValidationError("loss weights must be nonnegative")
        if not 0.0 < self.delta < 1.0:
            raise ValidationError(f"delta must lie in (0, 1), got {self.delta}")
        if self.patch_radius < 0:
            raise ValidationError("patch_radius must be >= 0")

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def masked_l1(pred, target, mask=None):
    if pred.shape != target.shape:
        raise ShapeError(f"L1 operands differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = (pred - target).abs()
    if mask is None:
        return diff.mean()
    m = mask.to(diff.dtype)
    denom = m.sum() * diff.shape[1]
    if denom <= 0:
        raise ValidationError("masked L1 over an empty mask")
    return (diff * m).sum() / denom


def supervised_loss(pred, gt, mask=None, cfg=LossConfig()):
    """Synthetic-data loss on normals, albedo and lighting.

    ``pred`` and ``gt`` are ``(albedo, normal, env)`` triples; ``gt[2]`` is the
    approximated target lighting. The lighting term compares direct renders
    of the ground-truth albedo and normals under both lightings. Returns
    ``(total, {"normal", "albedo", "lighting"})``.
    """
    a_hat, n_hat, l_hat = pred
    a_gt, n_gt, l_gt = gt
    if a_gt is None or n_gt is None or l_gt is None:
        raise ValidationError("supervised loss needs ground-truth albedo, normal and lighting")
    terms = {
        "normal": masked_l1(n_hat, n_gt, mask),
        "albedo": masked_l1(a_hat, a_gt, mask),
        "lighting": masked_l1(
            shade_direct_torch(a_gt, n_gt, l_hat, cfg.weighting, mask),
            shade_direct_torch(a_gt, n_gt, l_gt, cfg.weighting, mask),
            mask,
        ),
    }
    total = (
        cfg.normal_weight * terms["normal"]
        + cfg.albedo_weight * terms["albedo"]
        + cfg.lighting_weight * terms["lighting"]
    )
    return total, terms


def reconstruction_loss(image, direct, residual=None, mask=None):
    """L1 between the image and direct + residual renders (residual optional)."""
    recon = direct if residual is None else direct + residual
    return masked_l1(recon, image, mask)


def _pixel_index(judgments, height, width, device):
    pts = torch.tensor([[*j.point1, *j.point2] for j in judgments], dtype=torch.float64)
    c1 = (pts[:, 0] * width).long().clamp_max(width - 1)
    r1 = (pts[:, 1] * height).long().clamp_max(height - 1)
    c2 = (pts[:, 2] * width).long().clamp_max(width - 1)
    r2 = (pts[:, 3] * height).long().clamp_max(height - 1)
    return [t.to(device) for t in (r1, c1, r2, c2)]


def judgment_hinges(albedo, judgments, mask=None, cfg=LossConfig()):
    """Per-judgment weighted hinge values for one ``(3, H, W)`` albedo map.

    Returns ``(values, keep)``: ``values[t]`` is ``w_t`` times the hinge and
    ``keep`` flags judgments whose points are both on valid pixels.
    """
    if albedo.dim() != 3 or albedo.shape[0] != 3:
        raise ShapeError(f"albedo must be (3, H, W), got {tuple(albedo.shape)}")
    _, h, w = albedo.shape
    luma = torch.as_tensor(LUMA, dtype=albedo.dtype, device=albedo.device)
    lum = torch.einsum("chw,c->hw", albedo, luma)[None, None]
    k = 2 * cfg.patch_radius + 1
    patch = F.avg_pool2d(lum, k, stride=1, padding=cfg.patch_radius, count_include_pad=False)[0, 0]
    r1i, c1i, r2i, c2i = _pixel_index(judgments, h, w, albedo.device)
    r1 = patch[r1i, c1i].clamp_min(cfg.albedo_floor)
    r2 = patch[r2i, c2i].clamp_min(cfg.albedo_floor)
    if mask is None:
        keep = torch.ones(len(judgments), dtype=torch.bool, device=albedo.device)
    else:
        m = mask.reshape(h, w).bool()
        keep = m[r1i, c1i] & m[r2i, c2i]

    d = cfg.delta
    darker1 = torch.relu(1.0 + d - r2 / r1)
    darker2 = torch.relu(1.0 + d - r1 / r2)
    equal = torch.relu(r1 / r2 - 1.0 - d) + torch.relu(r2 / r1 - 1.0 - d)
    rel = [j.relation for j in judgments]
    is1 = torch.tensor([r is Relation.POINT1_DARKER for r in rel], device=albedo.device)
    is2 = torch.tensor([r is Relation.POINT2_DARKER for r in rel], device=albedo.device)
    hinge = torch.where(is1, darker1, torch.where(is2, darker2, equal))
    weight = torch.tensor([j.weight for j in judgments], dtype=albedo.dtype, device=albedo.device)
    return weight * hinge, keep


def whdr_hinge_loss(albedo, judgments, mask=None, cfg=LossConfig()):
    """Weak supervision from pairwise reflectance judgments.

    ``albedo`` is ``(B, 3, H, W)`` and ``judgments`` a list (one entry per
    batch item) of judgment lists. The loss is the mean over kept judgments of
    ``w_t * hinge``. Returns ``(loss, skipped)``.
    """
    if albedo.dim() == 3:
        albedo = albedo[None]
        judgments = [judgments]
        mask = None if mask is None else mask[None]
    if len(judgments) != albedo.shape[0]:
        raise ShapeError("one judgment list per batch item is required")
    values, skipped = [], 0
    for b, js in enumerate(judgments):
        if not js:
            continue
        v, keep = judgment_hinges(albedo[b], js, None if mask is None else mask[b], cfg)
        skipped += int((~keep).sum())
        values.append(v[keep])
    if not values or sum(v.numel() for v in values) == 0:
        return albedo.sum() * 0.0, skipped
    return torch.cat(values).mean(), skipped


def normal_supervision_loss(pred, gt, mask=None):
    if mask is not None and not bool(mask.any()):
        raise ValidationError("normal supervision over an empty mask")
    return masked_l1(pred, gt, mask)


def pseudo_supervision_loss(pred, pseudo, mask=None, pseudo_hash=None, expected_hash=None):
    """L1 against frozen-model targets: returns ``(L_a, L_n, L_e)``."""
    if pseudo_hash is not None and expected_hash is not None and pseudo_hash != expected_hash:
        raise ValidationError(
            f"stale pseudo targets: cached for config {pseudo_hash}, running {expected_hash}"
        )
    a_hat, n_hat, l_hat = pred
    a_ps, n_ps, l_ps = pseudo
    return (
        masked_l1(a_hat, a_ps, mask),
        masked_l1(n_hat, n_ps, mask),
        masked_l1(l_hat, l_ps),
    )


def composite_weights(mode, cfg=LossConfig()):
    if mode == "IIW":
        return cfg.iiw_weights
    if mode == "NYU":
        return cfg.nyu_weights
    raise ValidationError(f"unknown dataset mode {mode!r}")


def composite_real_loss(terms, mode, cfg=LossConfig()):
    """Weighted sum of the real-data terms for ``mode`` in {"IIW", "NYU"}.

    Terms the mode does not use are ignored; a missing required term raises.
    """
    weights = composite_weights(mode, cfg)
    missing = [k for k in weights if k not in terms]
    if missing:
        raise ValidationError(f"{mode} composite loss is missing terms: {', '.join(missing)}")
    total = 0.0
    for name, w in weights.items():
        total = total + w * terms[name]
    return total
