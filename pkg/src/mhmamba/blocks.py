"""Encoder building blocks: stem, GLA, multi-head Mamba, CSCA, downsampling."""
from __future__ import annotations

import contextlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv3d, InstanceNorm, LayerNorm, Module, activation, parameter
from .ssm import DEFAULT_CHUNK, SSMHeadParams, flatten_tokens, selective_scan, unflatten_tokens

_gate_log: list | None = None


@contextlib.contextmanager
def capture_gates():
    """Collect every sigmoid gate map produced inside the block as (kind, array)."""
    global _gate_log
    prev, _gate_log = _gate_log, []
    try:
        yield _gate_log
    finally:
        _gate_log = prev


def _log_gate(kind: str, t: Tensor) -> Tensor:
    if _gate_log is not None:
        _gate_log.append((kind, t.data))
    return t


class ConfigError(ValueError):
    pass


def scalar_param(value, dtype) -> Tensor:
    return parameter(np.asarray(value), dtype)


class Stem(Module):
    """Depthwise 7^3 stride-2 convolution followed by a pointwise projection."""

    def __init__(self, c_in=4, c_out=48, rng=None, dtype=np.float32):
        self.depthwise = Conv3d(c_in, c_in, 7, stride=2, padding=3, groups=c_in, rng=rng, dtype=dtype)
        self.pointwise = Conv3d(c_in, c_out, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class Downsample(Module):
    def __init__(self, c_in, c_out, rng=None, dtype=np.float32):
        self.conv = Conv3d(c_in, c_out, 3, stride=2, padding=1, rng=rng, dtype=dtype)

    def forward(self, x):
        for ax, n in zip(("depth", "height", "width"), x.shape[2:]):
            if n < 2:
                raise ConfigError(f"cannot downsample: {ax} extent is {n}")
        return self.conv(x)


# The Sobel magnitude of a unit-slope ramp is 32; scaling the edge branch by 1/32
# at init keeps the block near unit gain so activations do not compound per block.
GLA_ALPHA_INIT = 1.0 / 32


class GLA(Module):
    """alpha * Sobel3D(F) + beta * Conv(ReLU(IN(F)))."""

    def __init__(self, channels, rng=None, dtype=np.float32, alpha=GLA_ALPHA_INIT, beta=1.0):
        self.norm = InstanceNorm(channels, dtype)
        self.conv = Conv3d(channels, channels, 3, padding=1, rng=rng, dtype=dtype)
        self.alpha = scalar_param(alpha, dtype)
        self.beta = scalar_param(beta, dtype)

    def forward(self, x):
        edge = ad.sobel3d(x)
        detail = self.conv(ad.relu(self.norm(x)))
        return ad.mul(edge, self.alpha) + ad.mul(detail, self.beta)


class MambaHead(Module):
    """One head: regular conv + activation, then an SSM path and a conv-only
    mixing path fused by a learned per-channel gate."""

    def __init__(self, channels, d_state=16, rng=None, dtype=np.float32,
                 act="relu", chunk=DEFAULT_CHUNK):
        rng = rng or np.random.default_rng(0)
        self.pre_conv = Conv3d(channels, channels, 3, padding=1, rng=rng, dtype=dtype)
        self.ssm = SSMHeadParams.init(channels, d_state, rng, dtype)
        self.mix_conv = Conv3d(channels, channels, 3, padding=1, rng=rng, dtype=dtype)
        self.gate = Conv3d(2 * channels, channels, 1, rng=rng, dtype=dtype)
        self._act = activation(act)
        self._chunk = chunk

    def forward(self, x):
        z = self._act(self.pre_conv(x))
        seq = selective_scan(flatten_tokens(z), self.ssm, self._chunk)
        s = unflatten_tokens(seq, z.shape[2:])
        m = self.mix_conv(z)
        g = _log_gate("g", ad.sigmoid(self.gate(ad.concat([s, m], axis=1))))
        return ad.mul(g, s) + ad.mul(ad.one_minus(g), m)


class MultiHeadMamba(Module):
    """LN -> split into heads -> per-head Mamba -> concat -> W_p + delta * input."""

    def __init__(self, channels, heads=4, d_state=16, rng=None, dtype=np.float32,
                 act="relu", chunk=DEFAULT_CHUNK, delta=1.0):
        if heads < 1 or channels % heads:
            raise ConfigError(f"channels={channels} not divisible by heads={heads}")
        rng = rng or np.random.default_rng(0)
        self.heads_count = heads
        self.norm = LayerNorm(channels, dtype)
        self.heads = [MambaHead(channels // heads, d_state, rng, dtype, act, chunk)
                      for _ in range(heads)]
        self.proj = Conv3d(channels, channels, 1, rng=rng, dtype=dtype)
        self.delta = scalar_param(delta, dtype)

    def mixed(self, x):
        """Concatenated head outputs before the output projection."""
        parts = ad.split(self.norm(x), self.heads_count, axis=1)
        return ad.concat([head(p) for head, p in zip(self.heads, parts)], axis=1)

    def forward(self, x):
        return self.proj(self.mixed(x)) + ad.mul(x, self.delta)


class CSCA(Module):
    """Channel/spatial calibration fused by a global gate, then LN + MLP."""

    def __init__(self, channels, reduction=4, spatial_kernel=7, rng=None,
                 dtype=np.float32, act="relu", mlp_ratio=4):
        if channels % reduction:
            raise ConfigError(f"reduction {reduction} does not divide channels={channels}")
        rng = rng or np.random.default_rng(0)
        hidden = channels // reduction
        self.fc1 = Conv3d(channels, hidden, 1, rng=rng, dtype=dtype)
        self.fc2 = Conv3d(hidden, channels, 1, rng=rng, dtype=dtype)
        self.spatial = Conv3d(4, 1, spatial_kernel, padding=spatial_kernel // 2, rng=rng, dtype=dtype)
        bound = 1.0 / np.sqrt(2 * channels)
        self.gate_w = parameter(rng.uniform(-bound, bound, (1, 2 * channels)), dtype)
        self.gate_b = parameter(np.zeros(1), dtype)
        self.out_norm = LayerNorm(channels, dtype)
        self.mlp1 = Conv3d(channels, mlp_ratio * channels, 1, rng=rng, dtype=dtype)
        self.mlp2 = Conv3d(mlp_ratio * channels, channels, 1, rng=rng, dtype=dtype)
        self._act = activation(act)

    def channel_mlp(self, pooled):
        return self.fc2(ad.relu(self.fc1(pooled)))

    def calibrate(self, x):
        """Return (F_c, F_s, lambda, F_CSCA) for input ``x``."""
        att_c = _log_gate("channel", ad.sigmoid(
            self.channel_mlp(ad.pool_stats(x, "gap")) + self.channel_mlp(ad.pool_stats(x, "gmp"))))
        f_c = ad.mul(att_c, x)
        stats = ad.concat([ad.pool_stats(x, k) for k in ("mean", "std", "max", "min")], axis=1)
        att_s = _log_gate("spatial", ad.sigmoid(self.spatial(stats)))
        f_s = ad.mul(att_s, x)
        B, C = x.shape[:2]
        pooled = ad.concat([ad.pool_stats(f_c, "gap"), ad.pool_stats(f_s, "gap")], axis=1)
        logit = ad.einsum("bk,ok->bo", pooled.reshape(B, 2 * C), self.gate_w) + self.gate_b.reshape(1, 1)
        lam = _log_gate("lambda", ad.sigmoid(logit)).reshape(B, 1, 1, 1, 1)
        fused = ad.mul(lam, f_c) + ad.mul(ad.one_minus(lam), f_s) + x
        return f_c, f_s, lam, fused

    def mlp(self, x):
        return self.mlp2(self._act(self.mlp1(self.out_norm(x))))

    def forward(self, x):
        return self.mlp(self.calibrate(x)[3])


class MHMBlock(Module):
    """GLA -> multi-head Mamba -> CSCA, with a residual around the final LN + MLP."""

    def __init__(self, channels, heads=4, d_state=16, reduction=4, rng=None,
                 dtype=np.float32, act="relu", chunk=DEFAULT_CHUNK):
        rng = rng or np.random.default_rng(0)
        self.gla = GLA(channels, rng, dtype)
        self.mhm = MultiHeadMamba(channels, heads, d_state, rng, dtype, act, chunk)
        self.csca = CSCA(channels, reduction, rng=rng, dtype=dtype, act=act)

    def forward(self, x):
        f = self.mhm(self.gla(x))
        calibrated = self.csca.calibrate(f)[3]
        return calibrated + self.csca.mlp(calibrated)
