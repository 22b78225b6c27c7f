"""Selective state-space scan for one head.

Per token x_t (length C_h) the step size, transition and projections are

    delta_t = softplus(W_delta x_t + b_delta)           (C_h,)
    Abar_t  = exp(delta_t[:, None] * A),  A = -exp(A_log) (C_h, S)
    Bbar_t  = delta_t[:, None] * (W_B x_t)[None, :]       (C_h, S)
    C_t     = W_C x_t                                     (S,)

and the recurrence is h_t = Abar_t h_{t-1} + Bbar_t x_t, y_t = h_t C_t + D x_t.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels as K
from .autodiff import Tensor

DEFAULT_CHUNK = 64
# (B, tokens, C, S) elements per segment of the forward-only scan; about 1 MB at float32
FORWARD_SEGMENT_ELEMENTS = 1 << 18


@dataclass
class SSMHeadParams:
    A_log: Tensor      # (C_h, S)
    W_B: Tensor        # (S, C_h)
    W_C: Tensor        # (S, C_h)
    W_delta: Tensor    # (C_h, C_h)
    b_delta: Tensor    # (C_h,)
    D_skip: Tensor     # (C_h,)

    @property
    def channels(self) -> int:
        return self.A_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.A_log, self.W_B, self.W_C, self.W_delta, self.b_delta, self.D_skip]

    @classmethod
    def init(cls, channels: int, d_state: int, rng: np.random.Generator,
             dtype=np.float64) -> "SSMHeadParams":
        """A_log = log(1..S) per state; projections uniform in +-1/sqrt(C_h)."""
        bound = 1.0 / np.sqrt(channels)

        def u(*shape):
            return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)
        a_log = np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (channels, 1))
        return cls(
            A_log=Tensor(a_log.astype(dtype), requires_grad=True),
            W_B=u(d_state, channels),
            W_C=u(d_state, channels),
            W_delta=u(channels, channels),
            b_delta=u(channels),
            D_skip=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        )

    @classmethod
    def from_arrays(cls, **arrays) -> "SSMHeadParams":
        return cls(**{k: v if isinstance(v, Tensor) else Tensor(np.asarray(v)) for k, v in arrays.items()})


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def discretize(params: SSMHeadParams, x: Tensor):
    """Input-dependent (Abar, Bbar, C, delta) for every token of ``x`` (B, N, C_h).

    Also accepts a single token of shape (C_h,).
    """
    x = _t(x)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, 1, -1)
    ch = params.channels
    if x.shape[-1] != ch:
        raise ValueError(f"token length {x.shape[-1]} != head width {ch}")
    delta = ad.softplus(ad.einsum("bnc,dc->bnd", x, params.W_delta)
                        + params.b_delta.reshape(1, 1, ch))
    A = ad.neg(ad.exp(params.A_log))
    abar = ad.exp(ad.mul(delta.reshape(*delta.shape, 1), A.reshape(1, 1, *A.shape)))
    bt = ad.einsum("bnc,sc->bns", x, params.W_B)
    bbar = ad.mul(delta.reshape(*delta.shape, 1), bt.reshape(bt.shape[0], bt.shape[1], 1, -1))
    ct = ad.einsum("bnc,sc->bns", x, params.W_C)
    if single:
        return (abar.reshape(abar.shape[2:]), bbar.reshape(bbar.shape[2:]),
                ct.reshape(-1), delta.reshape(-1))
    return abar, bbar, ct, delta


def selective_scan(x: Tensor, params: SSMHeadParams, chunk: int | None = None) -> Tensor:
    """Differentiable scan over (B, N, C_h); ``chunk=None`` runs the sequential reference."""
    x = _t(x)
    if chunk is not None and not _needs_tape(x, params):
        segments = _segment_count(x.shape, params.d_state, chunk)
        if segments > 1:
            return _scan_segmented(x, params, chunk, segments)
    abar, bbar, ct, _ = discretize(params, x)
    u = ad.mul(bbar, x.reshape(*x.shape, 1))
    h = ad.linear_recurrence(abar, u, chunk)
    y = ad.einsum("bncs,bns->bnc", h, ct)
    return y + ad.mul(x, params.D_skip.reshape(1, 1, -1))


def _needs_tape(x: Tensor, params: SSMHeadParams) -> bool:
    return ad.grad_enabled() and any(t.requires_grad for t in [x] + params.tensors())


def _segment_count(shape, d_state: int, chunk: int) -> int:
    B, N, C = shape
    return min(-(-N // chunk), -(-B * N * C * d_state // FORWARD_SEGMENT_ELEMENTS))


def _scan_segmented(x: Tensor, params: SSMHeadParams, chunk: int, segments: int) -> Tensor:
    # Forward-only path: discretise, scan and read out one token segment at a
    # time, carrying the state, so the (B, N, C, S) intermediates never exist
    # at full length and the cost per token does not grow with N.
    N = x.shape[1]
    span = -(-(-(-N // chunk)) // segments) * chunk
    out = None
    h0 = None
    with ad.no_grad():
        for s in range(0, N, span):
            xs = Tensor(x.data[:, s:s + span])
            abar, bbar, ct, _ = discretize(params, xs)
            u = bbar.data * xs.data.reshape(*xs.shape, 1)
            h = K.linear_scan_blocked(abar.data, u, chunk, h0)
            y = ad.einsum("bncs,bns->bnc", Tensor(h), ct) + ad.mul(xs, params.D_skip.reshape(1, 1, -1))
            if out is None:
                out = np.empty(x.shape, dtype=y.dtype)
            out[:, s:s + span] = y.data
            h0 = h[:, -1]
    return Tensor(out)


def _run(x, params, chunk):
    if isinstance(x, Tensor):
        return selective_scan(x, params, chunk)
    with ad.no_grad():
        return selective_scan(Tensor(np.asarray(x)), params, chunk).data


def scan_sequential(x, params: SSMHeadParams):
    """Exact left-to-right recurrence from h_0 = 0. Arrays in, arrays out."""
    return _run(x, params, None)


def scan_blocked(x, params: SSMHeadParams, chunk: int = DEFAULT_CHUNK):
    """Chunked scan; matches :func:`scan_sequential` up to rounding."""
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    return _run(x, params, chunk)


def flatten_tokens(x):
    """(B, C_h, D, H, W) -> (B, D*H*W, C_h) in raster (D, H, W) order."""
    if isinstance(x, Tensor):
        B, C = x.shape[:2]
        return ad.transpose(x.reshape(B, C, -1), (0, 2, 1))
    x = np.asarray(x)
    return np.ascontiguousarray(x.reshape(x.shape[0], x.shape[1], -1).transpose(0, 2, 1))


def unflatten_tokens(seq, spatial):
    """Inverse of :func:`flatten_tokens` for spatial dims ``(D, H, W)``."""
    if isinstance(seq, Tensor):
        B, _, C = seq.shape
        return ad.transpose(seq, (0, 2, 1)).reshape(B, C, *spatial)
    seq = np.asarray(seq)
    return np.ascontiguousarray(seq.transpose(0, 2, 1)).reshape(seq.shape[0], seq.shape[2], *spatial)
