"""Scene records, dataset ingestion and the analytic scene generator.

All maps are numpy arrays in linear radiance, ``(H, W, 3)`` float64, with an
``(H, W)`` bool validity mask. Network-facing maps are resized to 240x320 on
load unless another size is requested.
"""

import enum
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from invrender.errors import DataIOError, ParseError, ShapeError, ValidationError
from invrender.grid import ENV_COLS, ENV_ROWS, EnvironmentMap
from invrender.render import shade_direct

log = logging.getLogger(__name__)

IMAGE_SIZE = (240, 320)
GAMMA = 2.2
SPLITS = ("train", "val", "test")
MAP_FIELDS = ("image", "albedo", "normal", "env", "mask", "judgments")


class Relation(enum.Enum):
    POINT1_DARKER = "1"
    POINT2_DARKER = "2"
    EQUAL = "E"


@dataclass(frozen=True)
class ReflectanceJudgment:
    point1: tuple
    point2: tuple
    relation: Relation
    weight: float

    def __post_init__(self):
        for p in (self.point1, self.point2):
            if len(p) != 2 or not all(0.0 <= v <= 1.0 for v in p):
                raise ValidationError(f"judgment point {p} is not a normalized image coordinate")
        if not np.isfinite(self.weight) or self.weight < 0:
            raise ValidationError(f"judgment weight must be finite and >= 0, got {self.weight}")
        if not isinstance(self.relation, Relation):
            raise ValidationError(f"bad relation {self.relation!r}")


@dataclass
class SceneSample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    albedo: np.ndarray = None
    normal: np.ndarray = None
    env: EnvironmentMap = None
    judgments: list = None
    warnings: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.image.shape[:2]


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    split: str
    paths: dict
    missing: tuple = ()


@dataclass
class DatasetIndex:
    records: list
    root: Path = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def ids(self, split=None):
        return [r.id for r in self.records if split is None or r.split == split]

    def get(self, id):
        for r in self.records:
            if r.id == id:
                return r
        raise KeyError(id)


# --------------------------------------------------------------------------
# colour encodings


def srgb_decode(values):
    return np.power(np.clip(values, 0.0, None), GAMMA)


def srgb_encode(values):
    return np.power(np.clip(values, 0.0, 1.0), 1.0 / GAMMA)


def encode_normals(normal):
    return (np.asarray(normal) + 1.0) / 2.0


def decode_normals(encoded):
    """Map ``(n + 1) / 2`` storage back to vectors and renormalise.

    Returns ``(normals, max_deviation)`` where the deviation is the largest
    departure from unit length before renormalisation (zero vectors ignored).
    """
    raw = np.asarray(encoded, dtype=np.float64) * 2.0 - 1.0
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    nonzero = norm[..., 0] > 1e-6
    deviation = float(np.max(np.abs(norm[nonzero] - 1.0))) if nonzero.any() else 0.0
    out = np.where(nonzero[..., None], raw / np.maximum(norm, 1e-12), 0.0)
    return out, deviation


# --------------------------------------------------------------------------
# file I/O


def _imread(path):
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"file not found: {path}")
    if path.suffix == ".npy":
        return np.load(path)
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED | cv2.IMREAD_ANYDEPTH | cv2.IMREAD_ANYCOLOR)
    if data is None:
        raise DataIOError(f"could not decode image: {path}")
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_BGRA2RGB if data.shape[2] == 4 else cv2.COLOR_BGR2RGB)
    return data


def read_rgb(path):
    """Linear RGB from a file: 8-bit is sRGB-decoded, 16-bit and float are linear."""
    data = _imread(path)
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=2)
    if data.dtype == np.uint8:
        return srgb_decode(data.astype(np.float64) / 255.0)
    if data.dtype == np.uint16:
        return data.astype(np.float64) / 65535.0
    return data.astype(np.float64)


def read_normals(path):
    data = _imread(path)
    if data.dtype == np.uint8:
        return decode_normals(data.astype(np.float64) / 255.0)
    if data.dtype == np.uint16:
        return decode_normals(data.astype(np.float64) / 65535.0)
    data = data.astype(np.float64)
    norm = np.linalg.norm(data, axis=-1, keepdims=True)
    nonzero = norm[..., 0] > 1e-6
    deviation = float(np.max(np.abs(norm[nonzero] - 1.0))) if nonzero.any() else 0.0
    return np.where(nonzero[..., None], data / np.maximum(norm, 1e-12), 0.0), deviation


def read_mask(path):
    data = _imread(path)
    if data.ndim == 3:
        data = data.max(axis=2)
    return np.asarray(data) > 0


def read_env(path, rows=ENV_ROWS, cols=ENV_COLS):
    data = _imread(path).astype(np.float64)
    if data.shape[:2] != (rows, cols):
        data = cv2.resize(data, (cols, rows), interpolation=cv2.INTER_AREA)
    return EnvironmentMap(np.clip(data, 0.0, None))


def _imwrite(path, rgb):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if rgb.ndim == 3:
        rgb = cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), rgb):
        raise DataIOError(f"could not write {path}")


def write_ldr(path, linear):
    """8-bit PNG: clip to [0, 1] then gamma 2.2 encode."""
    _imwrite(path, np.round(srgb_encode(linear) * 255.0).astype(np.uint8))


def write_png16(path, values):
    """16-bit PNG of values already in [0, 1] (no gamma)."""
    _imwrite(path, np.round(np.clip(values, 0.0, 1.0) * 65535.0).astype(np.uint16))


def write_normals(path, normal):
    write_png16(path, encode_normals(normal))


def write_mask(path, mask):
    _imwrite(path, np.where(mask, 255, 0).astype(np.uint8))


def write_env(path, env):
    path = Path(path)
    rad = env.radiance if isinstance(env, EnvironmentMap) else np.asarray(env)
    if path.suffix == ".npy":
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, rad)
    else:
        _imwrite(path, rad.astype(np.float32))


# --------------------------------------------------------------------------
# manifest, samples, judgments


def load_dataset_manifest(path):
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"manifest not found: {path}")
    root = path.parent
    records, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(entry, dict):
            raise ParseError(f"{path}:{lineno}: expected an object")
        for key in ("id", "split", "image"):
            if key not in entry:
                raise ParseError(f"{path}:{lineno}: missing field {key!r}")
        if entry["split"] not in SPLITS:
            raise ParseError(f"{path}:{lineno}: unknown split {entry['split']!r}")
        rid = str(entry["id"])
        if rid in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate id {rid!r}")
        seen.add(rid)
        paths = {k: root / entry[k] for k in MAP_FIELDS if entry.get(k)}
        missing = tuple(k for k, p in paths.items() if not p.exists())
        if missing:
            log.warning("record %s references missing files: %s", rid, ", ".join(missing))
        records.append(DatasetRecord(rid, entry["split"], paths, missing))
    return DatasetIndex(records, root)


def _resize(data, size, interpolation):
    h, w = size
    if data.shape[:2] == (h, w):
        return data
    return cv2.resize(data, (w, h), interpolation=interpolation)


def load_sample(index, id, size=IMAGE_SIZE):
    record = index.get(id)
    paths = record.paths
    warnings = []

    image = _resize(read_rgb(paths["image"]), size, cv2.INTER_LINEAR)
    image = np.clip(image, 0.0, None)
    if "mask" in paths:
        mask = _resize(read_mask(paths["mask"]).astype(np.uint8), size, cv2.INTER_NEAREST) > 0
    else:
        mask = np.ones(size, dtype=bool)

    albedo = normal = env = judgments = None
    if "albedo" in paths:
        albedo = np.clip(_resize(read_rgb(paths["albedo"]), size, cv2.INTER_LINEAR), 0.0, 1.0)
    if "normal" in paths:
        normal, deviation = read_normals(paths["normal"])
        if deviation > 0.1:
            warnings.append(f"decoded normals deviate from unit length by {deviation:.3f}")
            log.warning("sample %s: %s", id, warnings[-1])
        normal = _resize(normal, size, cv2.INTER_NEAREST)
        norm = np.linalg.norm(normal, axis=-1, keepdims=True)
        normal = np.where(norm > 1e-6, normal / np.maximum(norm, 1e-12), 0.0)
        mask = mask & (norm[..., 0] > 1e-6)
    if "env" in paths:
        env = read_env(paths["env"])
    if "judgments" in paths:
        judgments = load_judgments(paths["judgments"])

    sample = SceneSample(id, image, mask, albedo, normal, env, judgments, warnings)
    validate_sample(sample)
    return sample


def _parse_point(value, idx, name):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ParseError(f"entry {idx}: {name} must be [x, y]")
    x, y = float(value[0]), float(value[1])
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValidationError(f"entry {idx}: {name} {value} outside [0, 1]^2")
    return (x, y)


def load_judgments(path):
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"judgments file not found: {path}")
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON ({exc.msg})") from None
    if not isinstance(entries, list):
        raise ParseError(f"{path}: expected a list of comparisons")
    out = []
    for idx, entry in enumerate(entries):
        try:
            p1 = _parse_point(entry["p1"], idx, "p1")
            p2 = _parse_point(entry["p2"], idx, "p2")
            token = str(entry["darker"])
            weight = float(entry["weight"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ParseError(f"{path}: entry {idx}: malformed comparison ({exc!r})") from None
        try:
            relation = Relation(token)
        except ValueError:
            raise ParseError(f"{path}: entry {idx}: unknown relation {token!r}") from None
        if not np.isfinite(weight) or weight < 0:
            raise ValidationError(f"{path}: entry {idx}: weight must be finite and >= 0, got {weight}")
        out.append(ReflectanceJudgment(p1, p2, relation, weight))
    return out


def save_judgments(path, judgments):
    payload = [
        {"p1": list(j.point1), "p2": list(j.point2), "darker": j.relation.value, "weight": j.weight}
        for j in judgments
    ]
    Path(path).write_text(json.dumps(payload, indent=1))


def validate_sample(sample):
    """Check every type invariant of a sample; raises on the first violation."""
    img = sample.image
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"{sample.id}: image must be (H, W, 3), got {img.shape}")
    hw = img.shape[:2]
    if not np.all(np.isfinite(img)) or np.any(img < 0):
        raise ValidationError(f"{sample.id}: image must be finite and nonnegative")
    if sample.mask.shape != hw:
        raise ShapeError(f"{sample.id}: mask shape {sample.mask.shape} != {hw}")
    if sample.albedo is not None:
        if sample.albedo.shape != img.shape:
            raise ShapeError(f"{sample.id}: albedo shape {sample.albedo.shape} != {img.shape}")
        if np.any(sample.albedo < 0) or np.any(sample.albedo > 1):
            raise ValidationError(f"{sample.id}: albedo outside [0, 1]")
    if sample.normal is not None:
        if sample.normal.shape != img.shape:
            raise ShapeError(f"{sample.id}: normal shape {sample.normal.shape} != {img.shape}")
        norms = np.linalg.norm(sample.normal[sample.mask], axis=-1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-5:
            raise ValidationError(f"{sample.id}: valid normals are not unit length")
    if sample.env is not None:
        sample.env.validate()
    return sample


# --------------------------------------------------------------------------
# analytic scenes


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    albedo: tuple


@dataclass
class SceneSpec:
    shapes: list
    env: EnvironmentMap
    height: int = IMAGE_SIZE[0]
    width: int = IMAGE_SIZE[1]
    fov_deg: float = 60.0
    albedo_jitter: float = 0.0


def camera_rays(height, width, fov_deg):
    """Unit ray directions of a pinhole camera at the origin looking down -z."""
    tan = np.tan(np.radians(fov_deg) / 2.0)
    aspect = width / height
    x = ((np.arange(width) + 0.5) / width * 2.0 - 1.0) * tan * aspect
    y = (1.0 - (np.arange(height) + 0.5) / height * 2.0) * tan
    d = np.stack(np.broadcast_arrays(x[None, :], y[:, None], -np.ones((height, width))), axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _intersect(shape, origin, rays):
    """Ray parameter of the nearest hit (inf on miss) and the surface normal."""
    if isinstance(shape, Sphere):
        c = np.asarray(shape.center, dtype=np.float64)
        oc = origin - c
        b = np.sum(rays * oc, axis=-1)
        disc = b * b - (np.sum(oc * oc, axis=-1) - shape.radius**2)
        root = np.sqrt(np.clip(disc, 0.0, None))
        t0, t1 = -b - root, -b + root
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        t = np.where(disc >= 0.0, t, np.inf)
        hit = origin + rays * np.where(np.isfinite(t), t, 0.0)[..., None]
        normal = (hit - c) / shape.radius
    elif isinstance(shape, Plane):
        n = np.asarray(shape.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = rays @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(shape.point, dtype=np.float64) - origin) @ n) / denom
        t = np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)
        normal = np.broadcast_to(n, rays.shape).copy()
    else:
        raise ValidationError(f"unknown shape {shape!r}")
    # normals face the ray origin
    flip = np.sum(normal * rays, axis=-1) > 0.0
    normal[flip] *= -1.0
    return t, normal


def trace(shapes, origin, rays):
    """Nearest-hit shape index (-1 on miss), hit distance and normal per ray."""
    best_t = np.full(rays.shape[:-1], np.inf)
    index = np.full(rays.shape[:-1], -1, dtype=np.int64)
    normal = np.zeros(rays.shape)
    for k, shape in enumerate(shapes):
        t, n = _intersect(shape, origin, rays)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        index[closer] = k
        normal[closer] = n[closer]
    return index, best_t, normal


def generate_analytic_scene(spec, seed=0, weighting="literal_sum", id=None):
    """Ray-cast spheres and planes and shade them with the direct renderer.

    The image is exactly ``shade_direct(albedo, normal, env)`` on the valid
    pixels, so the sample has a perfect decomposition.
    """
    if not spec.shapes:
        raise ValidationError("scene needs at least one shape")
    for s in spec.shapes:
        a = np.asarray(s.albedo, dtype=np.float64)
        if a.shape != (3,) or np.any(a < 0) or np.any(a > 1):
            raise ValidationError(f"shape albedo must be 3 values in [0, 1], got {s.albedo}")
    rays = camera_rays(spec.height, spec.width, spec.fov_deg)
    index, _, normal = trace(spec.shapes, np.zeros(3), rays)
    mask = index >= 0
    if not mask.any():
        raise ValidationError("no shape is visible: empty mask")

    palette = np.array([s.albedo for s in spec.shapes], dtype=np.float64)
    albedo = np.where(mask[..., None], palette[np.maximum(index, 0)], 0.0)
    if spec.albedo_jitter > 0:
        rng = np.random.default_rng(seed)
        noise = rng.uniform(-1.0, 1.0, albedo.shape) * spec.albedo_jitter
        albedo = np.where(mask[..., None], np.clip(albedo * (1.0 + noise), 0.0, 1.0), 0.0)
    normal[~mask] = 0.0
    image = shade_direct(albedo, normal, spec.env, weighting, mask)
    sample = SceneSample(
        id or f"analytic-{seed}", image, mask, albedo, normal, EnvironmentMap(spec.env.radiance.copy())
    )
    sample.meta["shape_index"] = index
    return sample


def brightest_direction(env):
    """Direction of the env cell with the largest total radiance."""
    flat = env.radiance.reshape(-1, 3).sum(axis=1)
    return env.grid.flat_directions()[int(np.argmax(flat))]


def cast_shadow_mask(spec, light_dir):
    """1 where a visible surface point is occluded towards ``light_dir``, else 0."""
    rays = camera_rays(spec.height, spec.width, spec.fov_deg)
    index, t, normal = trace(spec.shapes, np.zeros(3), rays)
    hit = rays * np.where(np.isfinite(t), t, 0.0)[..., None]
    origin = hit + 1e-6 * normal
    light = np.broadcast_to(np.asarray(light_dir, dtype=np.float64), rays.shape)
    shadow = np.zeros(index.shape, dtype=bool)
    for k, shape in enumerate(spec.shapes):
        if not isinstance(shape, Sphere):
            continue
        tk, _ = _intersect(shape, origin, light)
        shadow |= np.isfinite(tk) & (index != k) & (index >= 0)
    return shadow


def inject_cast_shadows(sample, spec, strength=0.5, light_dir=None):
    """Multiply a cast-shadow mask into the image (residual appearance).

    Albedo, normals and env are left untouched, so the direct renderer can no
    longer explain the darkened pixels.
    """
    if light_dir is None:
        light_dir = brightest_direction(spec.env)
    shadow = cast_shadow_mask(spec, light_dir)
    factor = np.where(shadow, 1.0 - strength, 1.0)[..., None]
    return replace(
        sample,
        image=sample.image * factor,
        warnings=list(sample.warnings),
        meta={**sample.meta, "shadow": shadow},
    )


def random_indoor_env(rng, rows=ENV_ROWS, cols=ENV_COLS, ambient=0.001, n_lights=2, peak=0.12,
                      sharpness=(20.0, 60.0)):
    """Dim ambient radiance plus a few bright lobes (windows, lamps).

    ``sharpness`` bounds the lobe concentration; small values give broad,
    low-frequency lighting.
    """
    grid = EnvironmentMap.zeros(rows, cols).grid
    dirs = grid.flat_directions()
    tint = rng.uniform(0.7, 1.0, 3)
    rad = np.tile(ambient * tint, (dirs.shape[0], 1))
    for _ in range(n_lights):
        # lights above the horizon and roughly in front of the scene
        theta = rng.uniform(0.15, 0.45) * np.pi
        phi = rng.uniform(0.1, 0.9) * np.pi
        centre = np.array([np.sin(theta) * np.cos(phi), np.cos(theta), np.sin(theta) * np.sin(phi)])
        sharp = rng.uniform(*sharpness)
        # a lobe's integrated power falls like 1/sharp; rescale so broad
        # lobes carry about as much power as a sharpness-40 one
        lobe = np.exp(sharp * (dirs @ centre - 1.0)) * min(1.0, sharp / 40.0)
        rad += peak * rng.uniform(0.3, 1.0) * lobe[:, None] * rng.uniform(0.8, 1.0, 3)
    return EnvironmentMap(rad.reshape(rows, cols, 3))


def random_room_spec(rng, env, height=IMAGE_SIZE[0], width=IMAGE_SIZE[1], n_spheres=2):
    """A box room (back wall, floor, side walls, ceiling) with spheres on the floor."""

    def colour(lo=0.2, hi=0.9):
        return tuple(rng.uniform(lo, hi, 3))

    shapes = [
        Plane((0.0, 0.0, -4.0), (0.0, 0.0, 1.0), colour()),
        Plane((0.0, -1.0, 0.0), (0.0, 1.0, 0.0), colour()),
        Plane((-2.2, 0.0, 0.0), (1.0, 0.0, 0.0), colour()),
        Plane((2.2, 0.0, 0.0), (-1.0, 0.0, 0.0), colour()),
        Plane((0.0, 1.6, 0.0), (0.0, -1.0, 0.0), colour()),
    ]
    for _ in range(n_spheres):
        r = rng.uniform(0.35, 0.6)
        shapes.append(Sphere((rng.uniform(-1.2, 1.2), -1.0 + r, rng.uniform(-3.4, -2.4)), r, colour()))
    return SceneSpec(shapes, env, height, width)


def judgments_from_albedo(albedo, mask, count, rng, delta=0.10, radius=1):
    """IIW-style judgments labelled from ground-truth albedo with the WHDR rule."""
    from invrender.metrics import sample_reflectance

    h, w = mask.shape
    valid = np.argwhere(mask)
    out = []
    while len(out) < count:
        a, b = valid[rng.integers(len(valid), size=2)]
        p1 = ((a[1] + 0.5) / w, (a[0] + 0.5) / h)
        p2 = ((b[1] + 0.5) / w, (b[0] + 0.5) / h)
        probe = [ReflectanceJudgment(p1, p2, Relation.EQUAL, 1.0)]
        r1, r2, _ = sample_reflectance(albedo, probe, mask, radius)
        if r2[0] / r1[0] > 1.0 + delta:
            rel = Relation.POINT1_DARKER
        elif r1[0] / r2[0] > 1.0 + delta:
            rel = Relation.POINT2_DARKER
        else:
            rel = Relation.EQUAL
        out.append(ReflectanceJudgment(p1, p2, rel, float(rng.uniform(0.5, 1.0))))
    return out


def analytic_fixtures(count, seed=0, height=IMAGE_SIZE[0], width=IMAGE_SIZE[1], shadows=False,
                      shadow_strength=0.5, judgments=0, prefix="fx", sharpness=(20.0, 60.0)):
    """Deterministic set of room scenes with exact ground truth.

    With ``shadows=True`` every scene gets cast shadows multiplied into its
    image. With ``judgments > 0`` each sample carries that many judgments.
    ``sharpness`` is passed to the lighting generator.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        env = random_indoor_env(rng, sharpness=sharpness)
        spec = random_room_spec(rng, env, height, width)
        sample = generate_analytic_scene(spec, seed=seed * 1000 + i, id=f"{prefix}{i:03d}")
        if shadows:
            sample = inject_cast_shadows(sample, spec, shadow_strength)
        if judgments:
            sample.judgments = judgments_from_albedo(sample.albedo, sample.mask, judgments, rng)
        sample.meta["spec"] = spec
        out.append(sample)
    return out


def write_dataset(samples, out_dir, split="train"):
    """Write samples in the manifest layout; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        entry = {"id": s.id, "split": split, "image": f"{s.id}/image.png"}
        d = out_dir / s.id
        write_ldr(d / "image.png", s.image)
        write_mask(d / "mask.png", s.mask)
        entry["mask"] = f"{s.id}/mask.png"
        if s.albedo is not None:
            np.save(d / "albedo.npy", s.albedo)
            entry["albedo"] = f"{s.id}/albedo.npy"
        if s.normal is not None:
            np.save(d / "normal.npy", s.normal)
            entry["normal"] = f"{s.id}/normal.npy"
        if s.env is not None:
            write_env(d / "env.npy", s.env)
            entry["env"] = f"{s.id}/env.npy"
        if s.judgments:
            save_judgments(d / "judgments.json", s.judgments)
            entry["judgments"] = f"{s.id}/judgments.json"
        lines.append(json.dumps(entry))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest
