"""IRN, RAR and the environment estimator, plus checkpoint I/O.

Layer shorthand used below: ``C(n, k)`` is a stride-1 conv + BN + ReLU,
``C*(n, k)`` the stride-2 variant. Channel counts are the published widths
scaled by ``base_channels / 64`` so that small smoke-test models keep the
same topology.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from invrender.errors import DataIOError, NumericError, ShapeError, ValidationError


@dataclass(frozen=True)
class ModelConfig:
    height: int = 240
    width: int = 320
    base_channels: int = 64
    res_blocks: int = 9
    env_res_blocks: int = 4
    env_rows: int = 18
    env_cols: int = 36
    latent_dim: int = 300
    env_bias: float = -5.0  # softplus(-5) ~ 6.7e-3, a dim indoor radiance
    light_strides: int = 3  # how many of the light head's 3x3 convs downsample

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise ValidationError("image height and width must be multiples of 4")
        if self.base_channels < 1 or self.res_blocks < 0 or self.latent_dim < 1:
            raise ValidationError("invalid model configuration")
        if not 0 <= self.light_strides <= 3:
            raise ValidationError("light_strides must be between 0 and 3")

    def ch(self, n):
        return max(1, round(n * self.base_channels / 64))

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _half(n):
    # stride-2, k3, pad-1 conv output size (ceil)
    return (n + 1) // 2


def conv_bn_relu(cin, cout, k, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1, bias=False),
            nn.BatchNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1, bias=False),
            nn.BatchNorm2d(c),
        )

    def forward(self, x):
        return x + self.body(x)


def _check_finite(x, layer):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activations after {layer}")
    return x


class LightHead(nn.Module):
    """C(256,1) - C*(256,3) - C*(128,3) - conv*(3,3) - bilinear resize - softplus.

    Reduced-resolution models can drop the leading strides
    (``cfg.light_strides < 3``) so the map before the resize keeps roughly
    the full model's 8x10 size.
    """

    def __init__(self, cfg, cin):
        super().__init__()
        self.size = (cfg.env_rows, cfg.env_cols)
        s = [1 + (i >= 3 - cfg.light_strides) for i in range(3)]
        self.body = nn.Sequential(
            conv_bn_relu(cin, cfg.ch(256), 1),
            conv_bn_relu(cfg.ch(256), cfg.ch(256), 3, s[0]),
            conv_bn_relu(cfg.ch(256), cfg.ch(128), 3, s[1]),
        )
        self.out = nn.Conv2d(cfg.ch(128), 3, 3, stride=s[2], padding=1)
        nn.init.constant_(self.out.bias, cfg.env_bias)

    def forward(self, x):
        x = self.out(self.body(x))
        x = F.interpolate(x, size=self.size, mode="bilinear", align_corners=False)
        return F.softplus(x)


class Decoder(nn.Module):
    """CD*(128,3) - CD*(64,3) - conv(3,7) - tanh."""

    def __init__(self, cfg):
        super().__init__()
        c = cfg.ch(256)
        self.body = nn.Sequential(
            nn.ConvTranspose2d(c, cfg.ch(128), 3, stride=2, padding=1, output_padding=1, bias=False),
            nn.BatchNorm2d(cfg.ch(128)),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(cfg.ch(128), cfg.ch(64), 3, stride=2, padding=1, output_padding=1, bias=False),
            nn.BatchNorm2d(cfg.ch(64)),
            nn.ReLU(inplace=True),
            nn.Conv2d(cfg.ch(64), 3, 7, padding=3),
            nn.Tanh(),
        )

    def forward(self, x):
        return self.body(x)


def _encoder(cfg, cin):
    return nn.Sequential(
        conv_bn_relu(cin, cfg.ch(64), 7),
        conv_bn_relu(cfg.ch(64), cfg.ch(128), 3, 2),
        conv_bn_relu(cfg.ch(128), cfg.ch(256), 3, 2),
    )


class IRN(nn.Module):
    """Image -> (albedo in [0, 1], unit normals, nonnegative env map)."""

    def __init__(self, cfg=ModelConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.ch(256)
        self.enc = _encoder(cfg, 3)
        self.normal_res = nn.Sequential(*[ResBlock(c) for _ in range(cfg.res_blocks)])
        self.albedo_res = nn.Sequential(*[ResBlock(c) for _ in range(cfg.res_blocks)])
        self.normal_dec = Decoder(cfg)
        self.albedo_dec = Decoder(cfg)
        self.light = LightHead(cfg, 3 * c)

    def _check_input(self, image):
        expected = (3, self.cfg.height, self.cfg.width)
        if image.dim() != 4 or tuple(image.shape[1:]) != expected:
            raise ShapeError(f"IRN expects (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                             f"got {tuple(image.shape)}")

    def encode(self, image):
        self._check_input(image)
        return _check_finite(self.enc(image), "enc")

    def forward(self, image):
        feat = self.encode(image)
        nf = _check_finite(self.normal_res(feat), "normal_res")
        af = _check_finite(self.albedo_res(feat), "albedo_res")
        normal = F.normalize(_check_finite(self.normal_dec(nf), "normal_dec"), dim=1, eps=1e-6)
        albedo = (_check_finite(self.albedo_dec(af), "albedo_dec") + 1.0) / 2.0
        env = _check_finite(self.light(torch.cat([feat, nf, af], dim=1)), "light")
        return albedo, normal, env


class EnvEstimator(nn.Module):
    """(image, albedo, normal) -> nonnegative env map."""

    def __init__(self, cfg=ModelConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.ch(256)
        self.enc = _encoder(cfg, 9)
        self.res = nn.Sequential(*[ResBlock(c) for _ in range(cfg.env_res_blocks)])
        self.light = LightHead(cfg, c)

    def forward(self, image, albedo, normal):
        x = torch.cat([image, albedo, normal], dim=1)
        expected = (9, self.cfg.height, self.cfg.width)
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"env estimator expects inputs of {expected[1]}x{expected[2]}, "
                             f"got {tuple(x.shape[2:])}")
        x = _check_finite(self.res(self.enc(x)), "res")
        return _check_finite(self.light(x), "light")


class RAR(nn.Module):
    """U-Net over (normal, albedo) with an image latent code at the bottleneck.

    Emits the residual image (unbounded sign) that the direct renderer
    cannot explain.
    """

    def __init__(self, cfg=ModelConfig()):
        super().__init__()
        self.cfg = cfg
        ch = cfg.ch
        self.e0 = conv_bn_relu(6, ch(64), 3)
        self.e1 = conv_bn_relu(ch(64), ch(64), 3, 2)
        self.e2 = conv_bn_relu(ch(64), ch(128), 3, 2)
        self.e3 = conv_bn_relu(ch(128), ch(256), 3, 2)
        self.e4 = conv_bn_relu(ch(256), ch(512), 3, 2)

        self.image_enc = nn.Sequential(
            conv_bn_relu(3, ch(64), 7),
            conv_bn_relu(ch(64), ch(128), 3, 2),
            conv_bn_relu(ch(128), ch(256), 3, 2),
            conv_bn_relu(ch(256), ch(128), 1),
            conv_bn_relu(ch(128), ch(64), 3),
            conv_bn_relu(ch(64), ch(32), 3, 2),
            conv_bn_relu(ch(32), ch(16), 3, 2),
        )
        h, w = cfg.height, cfg.width
        for _ in range(4):
            h, w = _half(h), _half(w)
        self.latent = nn.Linear(ch(16) * h * w, cfg.latent_dim)

        self.d3 = conv_bn_relu(ch(512) + cfg.latent_dim + ch(256), ch(512), 3)
        self.d2 = conv_bn_relu(ch(512) + ch(128), ch(256), 3)
        self.d1 = conv_bn_relu(ch(256) + ch(64), ch(128), 3)
        self.d0 = conv_bn_relu(ch(128) + ch(64), ch(64), 3)
        self.out = nn.Conv2d(ch(64), 3, 1)

    def encode_image(self, image):
        return self.latent(self.image_enc(image).flatten(1))

    @staticmethod
    def _up(x, skip):
        x = F.interpolate(x, size=skip.shape[2:], mode="bilinear", align_corners=False)
        return torch.cat([x, skip], dim=1)

    def forward(self, image, albedo, normal):
        expected = (3, self.cfg.height, self.cfg.width)
        for name, t in (("image", image), ("albedo", albedo), ("normal", normal)):
            if t.dim() != 4 or tuple(t.shape[1:]) != expected:
                raise ShapeError(f"RAR {name} must be (B, {expected[0]}, {expected[1]}, "
                                 f"{expected[2]}), got {tuple(t.shape)}")
        e0 = self.e0(torch.cat([normal, albedo], dim=1))
        e1 = self.e1(e0)
        e2 = self.e2(e1)
        e3 = self.e3(e2)
        e4 = self.e4(e3)
        z = self.encode_image(image)
        bottleneck = torch.cat([e4, z[:, :, None, None].expand(-1, -1, *e4.shape[2:])], dim=1)
        x = self.d3(self._up(bottleneck, e3))
        x = self.d2(self._up(x, e2))
        x = self.d1(self._up(x, e1))
        x = self.d0(self._up(x, e0))
        return _check_finite(self.out(x), "rar_out")


NETWORKS = {"irn": IRN, "rar": RAR, "env": EnvEstimator}


@dataclass
class ModelBundle:
    irn: IRN
    rar: RAR
    env_estimator: EnvEstimator
    config: ModelConfig
    stage_tag: str = "init"

    @classmethod
    def build(cls, cfg=ModelConfig(), seed=0):
        torch.manual_seed(seed)
        return cls(IRN(cfg), RAR(cfg), EnvEstimator(cfg), cfg)


def build_network(kind, cfg=ModelConfig(), seed=0):
    if kind not in NETWORKS:
        raise ValidationError(f"unknown network {kind!r}")
    torch.manual_seed(seed)
    return NETWORKS[kind](cfg)


def param_hash(module):
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def sidecar_path(path):
    return Path(path).with_suffix(".json")


def save_checkpoint(module, path, stage, config_hash, seed, step, kind, extra=None):
    """Write ``<path>`` (state dict) and its JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), path)
    meta = {
        "stage": stage,
        "config_hash": config_hash,
        "seed": int(seed),
        "step": int(step),
        "network": kind,
        "model": asdict(module.cfg),
    }
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def read_sidecar(path):
    side = sidecar_path(path)
    if not Path(path).exists() or not side.exists():
        raise DataIOError(f"checkpoint not found: {path}")
    return json.loads(side.read_text())


def load_checkpoint(path):
    """Rebuild the network recorded in the sidecar and load its weights."""
    meta = read_sidecar(path)
    cfg = ModelConfig(**meta["model"])
    net = NETWORKS[meta["network"]](cfg)
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types here
        raise DataIOError(f"could not read checkpoint {path}: {exc}") from None
    net.load_state_dict(state)
    net.eval()
    return net, meta
