"""Named finite-difference gradient checks: single ops, one block, AGF, the network.

Every scope runs at float64 and returns the max relative error between tape
gradients and central differences.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TOLERANCE = 1e-4


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _probe(out: Tensor, rng) -> Tensor:
    # weighted sum with fixed random weights so every output entry matters
    return ad.mul(out, rng.standard_normal(out.shape)).sum()


def _op_case(build: Callable) -> Callable:
    def run(size: int, seed: int) -> float:
        rng = np.random.default_rng(seed)
        f, inputs = build(rng, size)
        return ad.grad_check(f, inputs, h=1e-4)
    return run


def _conv(rng, n):
    x, w, b = _leaf(rng, 1, 2, n, n, n), _leaf(rng, 3, 2, 3, 3, 3), _leaf(rng, 3)
    return (lambda: _probe(ad.conv3d(x, w, b, 1, 1), np.random.default_rng(1))), [x, w, b]


def _conv_depthwise(rng, n):
    x, w = _leaf(rng, 1, 3, n, n, n), _leaf(rng, 3, 1, 3, 3, 3)
    return (lambda: _probe(ad.conv3d(x, w, None, 2, 1, groups=3), np.random.default_rng(1))), [x, w]


def _sobel(rng, n):
    x = _leaf(rng, 1, 2, n, n, n)
    return (lambda: _probe(ad.sobel3d(x), np.random.default_rng(1))), [x]


def _norm(fn):
    def build(rng, n):
        x, g, b = _leaf(rng, 2, 3, n, n, n), _leaf(rng, 3), _leaf(rng, 3)
        return (lambda: _probe(fn(x, g, b), np.random.default_rng(1))), [x, g, b]
    return build


def _pool(kind):
    def build(rng, n):
        x = _leaf(rng, 2, 4, n, n, n)
        return (lambda: _probe(ad.pool_stats(x, kind), np.random.default_rng(1))), [x]
    return build


def _unary(fn):
    def build(rng, n):
        x = _leaf(rng, 2, n, n, scale=2.0)
        return (lambda: _probe(fn(x), np.random.default_rng(1))), [x]
    return build


def _log_softmax(rng, n):
    x = _leaf(rng, 1, 4, n, n, n)
    return (lambda: _probe(ad.log_softmax(x, axis=1), np.random.default_rng(1))), [x]


def _upsample(rng, n):
    x = _leaf(rng, 1, 2, n, n, n)
    return (lambda: _probe(ad.upsample2(x), np.random.default_rng(1))), [x]


def _recurrence(rng, n):
    a = Tensor(rng.uniform(0.1, 0.95, (1, 4 * n, 3)), requires_grad=True)
    u = _leaf(rng, 1, 4 * n, 3)
    return (lambda: _probe(ad.linear_recurrence(a, u, max(1, n)), np.random.default_rng(1))), [a, u]


def _einsum(rng, n):
    a, b = _leaf(rng, 2, n, 3), _leaf(rng, 4, 3)
    return (lambda: _probe(ad.einsum("bnc,sc->bns", a, b), np.random.default_rng(1))), [a, b]


def _selective_scan(rng, n):
    from .ssm import SSMHeadParams, selective_scan
    p = SSMHeadParams.init(3, 4, rng, np.float64)
    x = _leaf(rng, 1, 2 * n, 3)
    return (lambda: _probe(selective_scan(x, p, None), np.random.default_rng(1))), p.tensors() + [x]


OPS = {
    "conv3d": _op_case(_conv),
    "conv3d_depthwise": _op_case(_conv_depthwise),
    "sobel3d": _op_case(_sobel),
    "layer_norm": _op_case(_norm(ad.layer_norm)),
    "instance_norm": _op_case(_norm(ad.instance_norm)),
    **{f"pool_{k}": _op_case(_pool(k)) for k in ("gap", "gmp", "mean", "std", "max", "min")},
    "sigmoid": _op_case(_unary(ad.sigmoid)),
    "relu": _op_case(_unary(ad.relu)),
    "softplus": _op_case(_unary(ad.softplus)),
    "exp": _op_case(_unary(ad.exp)),
    "log_softmax": _op_case(_log_softmax),
    "upsample": _op_case(_upsample),
    "linear_recurrence": _op_case(_recurrence),
    "einsum": _op_case(_einsum),
    "selective_scan": _op_case(_selective_scan),
}


def check_block(size: int = 4, seed: int = 0) -> float:
    """One full MHM block on a 1x8xsize^3 input; a few coordinates per tensor.

    h=1e-6 because at 1e-4 a perturbation can cross a ReLU or max kink.
    """
    from .blocks import MHMBlock
    blk = MHMBlock(8, 2, 4, 4, np.random.default_rng(seed), np.float64)
    rng = np.random.default_rng(seed + 100)
    x = _leaf(rng, 1, 8, size, size, size)
    r = rng.standard_normal(x.shape)
    f = lambda: ad.mul(blk(x), r).sum()
    return ad.grad_check(f, blk.parameters() + [x], h=1e-6, samples=6, largest=True)


def check_agf(size: int = 3, seed: int = 0) -> float:
    from .agf import AGF
    m = AGF(8, np.random.default_rng(seed), np.float64)
    rng = np.random.default_rng(seed + 1)
    enc, dec = _leaf(rng, 1, 8, size, size, size), _leaf(rng, 1, 8, size, size, size)
    r = rng.standard_normal(enc.shape)
    f = lambda: ad.mul(m(enc, dec), r).sum()
    return ad.grad_check(f, m.parameters() + [enc, dec], h=1e-4)


def check_network(size: int = 16, seed: int = 0, tensors: int = 40) -> float:
    """Combined loss through the full default network on a size^3 phantom.

    Checks the largest-gradient coordinate of ``tensors`` randomly chosen
    parameter tensors plus the input.
    """
    from .data import PhantomSpec, generate_phantom
    from .network import MHMambaNet, NetworkConfig
    from .training import combined_loss
    model = MHMambaNet(NetworkConfig(precision="float64", patch=(size,) * 3, seed=seed))
    s = size / 64
    spec = PhantomSpec(dims=(size,) * 3, radii=tuple(tuple(r * s for r in rr) for rr in PhantomSpec().radii),
                       jitter=max(1, round(4 * s)), seed=seed)
    img, lab = generate_phantom(spec)
    x = Tensor(img.astype(np.float64), requires_grad=True)
    f = lambda: combined_loss(model(x).logits, lab).total
    params = model.parameters()
    rng = np.random.default_rng(seed)
    chosen = [params[i] for i in sorted(rng.choice(len(params), min(tensors, len(params)), replace=False))]
    return ad.grad_check(f, chosen + [x], h=1e-5, samples=1, largest=True)


SCOPES = {**OPS, "block": check_block, "agf": check_agf, "network": check_network}

DEFAULT_SIZES = {"block": 4, "agf": 3, "network": 16}


def run_scope(scope: str, size: int | None = None, seed: int = 0) -> float:
    if scope not in SCOPES:
        raise KeyError(f"unknown gradcheck scope {scope!r}; choose from {', '.join(sorted(SCOPES))}")
    return SCOPES[scope](size if size is not None else DEFAULT_SIZES.get(scope, 3), seed)
