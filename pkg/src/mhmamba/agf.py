"""Adaptive gated fusion of encoder and decoder features at a skip connection."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .blocks import ConfigError, _log_gate
from .nn import Conv3d, Module

GROUPS = 4


class AGF(Module):
    """Split both inputs into four channel groups, blend each pair with a
    per-voxel sigmoid gate computed from the pair, then mix with a 1x1x1 conv."""

    def __init__(self, channels, rng=None, dtype=np.float32):
        if channels % GROUPS:
            raise ConfigError(f"AGF needs channels divisible by {GROUPS}, got {channels}")
        rng = rng or np.random.default_rng(0)
        width = channels // GROUPS
        self.channels = channels
        self.gates = [Conv3d(2 * width, 1, 1, rng=rng, dtype=dtype) for _ in range(GROUPS)]
        self.fuse = Conv3d(channels, channels, 1, rng=rng, dtype=dtype)

    def fused_groups(self, enc, dec):
        if enc.shape != dec.shape:
            raise ConfigError(f"encoder {enc.shape} and decoder {dec.shape} shapes differ")
        if enc.shape[1] != self.channels:
            raise ConfigError(f"expected {self.channels} channels, got {enc.shape[1]}")
        out = []
        for gate, e, d in zip(self.gates, ad.split(enc, GROUPS), ad.split(dec, GROUPS)):
            w = _log_gate("delta_k", ad.sigmoid(gate(ad.concat([e, d], axis=1))))
            out.append(ad.mul(w, e) + ad.mul(ad.one_minus(w), d))
        return out

    def forward(self, enc, dec):
        return self.fuse(ad.concat(self.fused_groups(enc, dec), axis=1))
