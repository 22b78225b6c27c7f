"""U-shaped assembly: stem, four MHM stages, convolutional decoder with AGF skips."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .agf import AGF
from .autodiff import Tensor
from .blocks import ConfigError, Downsample, MHMBlock, Stem
from .nn import Conv3d, InstanceNorm, Module
from .ssm import DEFAULT_CHUNK

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class NetworkConfig:
    in_channels: int = 4
    num_classes: int = 4
    channels: tuple = (48, 96, 192, 384)
    blocks: tuple = (2, 2, 2, 2)
    heads: int = 4
    d_state: int = 16
    reduction: int = 4
    activation: str = "relu"
    scan_chunk: int = DEFAULT_CHUNK
    patch: tuple = (32, 32, 32)
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.blocks = tuple(int(b) for b in self.blocks)
        self.patch = tuple(int(p) for p in self.patch)
        self.validate()

    def validate(self):
        if len(self.channels) != 4 or len(self.blocks) != 4:
            raise ConfigError("channels and blocks need one entry per stage (4)")
        if self.channels[0] != 48:
            raise ConfigError(f"stem width must be 48, got {self.channels[0]}")
        for c in self.channels:
            if c % self.heads or c % 4:
                raise ConfigError(f"channel width {c} must be divisible by heads={self.heads} and by 4")
            if c % self.reduction:
                raise ConfigError(f"channel width {c} not divisible by reduction={self.reduction}")
        if any(b < 1 for b in self.blocks):
            raise ConfigError("each stage needs at least one block")
        check_patch(self.patch)
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def to_dict(self) -> dict:
        return asdict(self)


def check_patch(dims):
    if len(dims) != 3 or any(d < 16 or d % 16 for d in dims):
        raise ConfigError(f"spatial dims {tuple(dims)} must each be a positive multiple of 16")


@dataclass
class NetworkOutput:
    logits: Tensor
    features: list = field(default_factory=list)


class ConvNormAct(Module):
    def __init__(self, channels, rng, dtype):
        self.conv = Conv3d(channels, channels, 3, padding=1, rng=rng, dtype=dtype)
        self.norm = InstanceNorm(channels, dtype)

    def forward(self, x):
        return ad.relu(self.norm(self.conv(x)))


class DecoderLevel(Module):
    """Reduce channels, upsample x2, fuse with the encoder skip, two conv layers."""

    def __init__(self, c_deep, c_skip, rng, dtype):
        self.reduce = Conv3d(c_deep, c_skip, 1, rng=rng, dtype=dtype)
        self.agf = AGF(c_skip, rng, dtype)
        self.convs = [ConvNormAct(c_skip, rng, dtype) for _ in range(2)]

    def forward(self, deep, skip):
        x = self.agf(skip, ad.upsample2(self.reduce(deep)))
        for conv in self.convs:
            x = conv(x)
        return x


class MHMambaNet(Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        cfg = cfg or NetworkConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.dtype
        ch = cfg.channels
        self.stem = Stem(cfg.in_channels, ch[0], rng, dt)
        self.stages = []
        for i, (c, n) in enumerate(zip(ch, cfg.blocks)):
            self.stages.append(_Stage(c, n, cfg, rng, dt))
        self.downsamples = [Downsample(ch[i], ch[i + 1], rng, dt) for i in range(3)]
        self.decoder = [DecoderLevel(ch[i + 1], ch[i], rng, dt) for i in (2, 1, 0)]
        self.head = Conv3d(ch[0], cfg.num_classes, 1, rng=rng, dtype=dt)
        self.assign_names()

    def _children(self):
        for key, val in super()._children():
            if key != "cfg":
                yield key, val

    def encode(self, x) -> list:
        feats = []
        f = self.stem(x)
        for i, stage in enumerate(self.stages):
            f = stage(f)
            feats.append(f)
            if i < 3:
                f = self.downsamples[i](f)
        return feats

    def forward(self, x) -> NetworkOutput:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.cfg.dtype))
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected input (B, {self.cfg.in_channels}, D, H, W), got {x.shape}")
        check_patch(x.shape[2:])
        feats = self.encode(x)
        d = feats[3]
        for level, skip in zip(self.decoder, (feats[2], feats[1], feats[0])):
            d = level(d, skip)
        # 1x1x1 projection and trilinear resize commute; project first at low resolution
        logits = ad.resize_trilinear(self.head(d), x.shape[2:])
        return NetworkOutput(logits, feats)


class _Stage(Module):
    def __init__(self, channels, n_blocks, cfg, rng, dtype):
        self.blocks = [MHMBlock(channels, cfg.heads, cfg.d_state, cfg.reduction, rng, dtype,
                                cfg.activation, cfg.scan_chunk) for _ in range(n_blocks)]

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def parameter_report(model: Module, depth: int = 1) -> list[tuple[str, int]]:
    """Per-module parameter counts grouped by the first ``depth`` name parts,
    followed by a ("total", n) row."""
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        key = ".".join(name.split(".")[:depth])
        groups[key] = groups.get(key, 0) + p.data.size
    rows = list(groups.items())
    rows.append(("total", sum(groups.values())))
    return rows


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_labels(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=1).astype(np.uint8)
