"""Evaluation metrics: WHDR, normal angular error, RMSE/MAD, env-map error."""

from dataclasses import asdict, dataclass, field

import numpy as np

from invrender import kernels
from invrender.errors import ShapeError, ValidationError
from invrender.grid import EnvironmentMap
from invrender.render import render_probe, shade_direct

LUMA = np.array([0.299, 0.587, 0.114])
ALBEDO_FLOOR = 1e-4
DEFAULT_DELTA = 0.10


@dataclass
class MetricReport:
    name: str
    value: float
    units: str
    sample_count: int
    per_sample: list = field(default=None)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValidationError(f"metric {self.name} is not finite")
        if self.sample_count <= 0:
            raise ValidationError(f"metric {self.name} has no samples")

    def to_dict(self):
        return asdict(self)


def _mask_for(shape, mask):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ShapeError(f"mask shape {mask.shape} != {tuple(shape)}")
    return mask


def judgment_pixels(judgments, height, width):
    """Integer (row, col) of both points of every judgment."""
    pts = np.array([[*j.point1, *j.point2] for j in judgments], dtype=np.float64).reshape(-1, 4)
    c1 = np.minimum((pts[:, 0] * width).astype(np.int64), width - 1)
    r1 = np.minimum((pts[:, 1] * height).astype(np.int64), height - 1)
    c2 = np.minimum((pts[:, 2] * width).astype(np.int64), width - 1)
    r2 = np.minimum((pts[:, 3] * height).astype(np.int64), height - 1)
    return r1, c1, r2, c2


def sample_reflectance(albedo, judgments, mask=None, radius=1, floor=ALBEDO_FLOOR):
    """Patch-mean albedo luminance at both points of each judgment.

    Returns ``(r1, r2, keep)``; ``keep`` is False where either point falls on
    an invalid pixel. Values are floored at ``floor``.
    """
    albedo = np.asarray(albedo, dtype=np.float64)
    h, w = albedo.shape[:2]
    mask = _mask_for((h, w), mask)
    lum = albedo @ LUMA
    r1i, c1i, r2i, c2i = judgment_pixels(judgments, h, w)
    r1 = np.maximum(kernels.patch_means(lum, r1i, c1i, radius), floor)
    r2 = np.maximum(kernels.patch_means(lum, r2i, c2i, radius), floor)
    keep = mask[r1i, c1i] & mask[r2i, c2i]
    return r1, r2, keep


def predicted_relations(r1, r2, delta=DEFAULT_DELTA):
    """'1' if point 1 is darker, '2' if point 2 is darker, else 'E'."""
    out = np.full(r1.shape, "E", dtype="<U1")
    out[r2 / r1 > 1.0 + delta] = "1"
    out[r1 / r2 > 1.0 + delta] = "2"
    return out


def whdr(albedo, judgments, delta=DEFAULT_DELTA, mask=None, radius=1):
    """Weighted human disagreement rate in percent."""
    if not judgments:
        raise ValidationError("whdr needs at least one judgment")
    r1, r2, keep = sample_reflectance(albedo, judgments, mask, radius)
    human = np.array([j.relation.value for j in judgments])
    weight = np.array([j.weight for j in judgments], dtype=np.float64)
    weight = np.where(keep, weight, 0.0)
    total = weight.sum()
    if total <= 0:
        raise ValidationError("whdr: total judgment weight is zero")
    wrong = predicted_relations(r1, r2, delta) != human
    return float(100.0 * np.sum(weight * wrong) / total)


def angular_errors(pred, gt, mask=None):
    """Per-pixel angle in degrees between two normal maps, over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"normal maps differ in shape: {pred.shape} vs {gt.shape}")
    mask = _mask_for(pred.shape[:2], mask)
    if not mask.any():
        raise ValidationError("angular error: empty mask")
    p = pred[mask]
    g = gt[mask]
    p = p / np.linalg.norm(p, axis=1, keepdims=True)
    g = g / np.linalg.norm(g, axis=1, keepdims=True)
    cos = np.clip(np.sum(p * g, axis=1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def median_angular_error(pred, gt, mask=None):
    return float(np.median(angular_errors(pred, gt, mask)))


def rmse_mad(pred, gt, mask=None):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"maps differ in shape: {pred.shape} vs {gt.shape}")
    mask = _mask_for(pred.shape[:2], mask)
    if not mask.any():
        raise ValidationError("rmse_mad: empty mask")
    diff = (pred - gt)[mask]
    return float(np.sqrt(np.mean(diff**2))), float(np.mean(np.abs(diff)))


def env_map_error(pred, gt):
    """Solid-angle weighted mean absolute radiance error, averaged over channels."""
    pred = pred if isinstance(pred, EnvironmentMap) else EnvironmentMap(pred)
    gt = gt if isinstance(gt, EnvironmentMap) else EnvironmentMap(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"environment maps on different grids: {pred.shape} vs {gt.shape}")
    omega = gt.grid.solid_angles[..., None]
    per_channel = np.sum(omega * np.abs(pred.radiance - gt.radiance), axis=(0, 1)) / omega.sum()
    return float(per_channel.mean())


def image_recon_error(image, albedo, normal, env, mask=None, weighting="literal_sum"):
    """Masked MAD between ``image`` and its direct re-rendering."""
    mask = _mask_for(np.shape(image)[:2], mask)
    recon = shade_direct(albedo, normal, env, weighting, mask)
    return rmse_mad(recon, image, mask)[1]


def probe_error(pred_env, probe_image, probe_mask, weighting="literal_sum"):
    """Compare a rendered diffuse ball against a reference probe image.

    The render is scaled so its median matches the reference median over the
    disk (exposure alignment), then ``(rmse, mad)`` is returned.
    """
    probe_image = np.asarray(probe_image, dtype=np.float64)
    if probe_image.shape[0] != probe_image.shape[1]:
        raise ShapeError("probe image must be square")
    render, disk = render_probe(pred_env, probe_image.shape[0], weighting)
    mask = disk & _mask_for(disk.shape, probe_mask)
    ref_med = np.median(probe_image[mask])
    pred_med = np.median(render[mask])
    scale = ref_med / pred_med if pred_med > 0 else 0.0
    return rmse_mad(render * scale, probe_image, mask)
