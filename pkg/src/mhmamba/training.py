"""Losses, schedule, patch sampling and the training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

DICE_EPS = 1e-5


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 1
    lr: float = 1e-3
    weight_decay: float = 1e-5
    poly_power: float = 0.9
    patch: tuple = (32, 32, 32)
    seed: int = 0
    mirror: bool = True
    optimizer: str = "sgd"
    momentum: float = 0.0

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossValue:
    total: Tensor
    dice: float
    ce: float


class NonFiniteLossError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(B, D, H, W) integer labels -> (B, K, D, H, W)."""
    labels = np.asarray(labels)
    oh = (labels[:, None] == np.arange(num_classes).reshape(1, -1, 1, 1, 1))
    return oh.astype(dtype)


def _check_labels(logits, labels):
    if labels.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")


def dice_loss(logits: Tensor, labels: np.ndarray, eps: float = DICE_EPS,
              log_probs: Tensor | None = None) -> Tensor:
    """1 - mean over foreground classes of soft Dice against one-hot labels."""
    _check_labels(logits, labels)
    K = logits.shape[1]
    probs = ad.exp(log_probs if log_probs is not None else ad.log_softmax(logits, axis=1))
    g = one_hot(labels, K, logits.dtype)[:, 1:]
    p = ad.take(probs, 1, 1, K)
    inter = ad.mul(p, g).sum(axis=(0, 2, 3, 4))
    psum = p.sum(axis=(0, 2, 3, 4))
    gsum = g.sum(axis=(0, 2, 3, 4))
    num = ad.scale(inter, 2.0) + eps
    ratio = ad.mul(num, _reciprocal(psum + (gsum + eps).astype(logits.dtype)))
    return ad.one_minus(ratio.mean())


def _reciprocal(a: Tensor) -> Tensor:
    inv = 1.0 / a.data
    return ad.record(inv, "reciprocal", (a,), lambda g: (-g * inv * inv,))


def ce_loss(logits: Tensor, labels: np.ndarray, log_probs: Tensor | None = None) -> Tensor:
    """Mean voxelwise negative log-probability of the true class."""
    _check_labels(logits, labels)
    lp = log_probs if log_probs is not None else ad.log_softmax(logits, axis=1)
    g = one_hot(labels, logits.shape[1], logits.dtype)
    n = labels.size
    return ad.scale(ad.mul(lp, g).sum(), -1.0 / n)


def combined_loss(logits: Tensor, labels: np.ndarray) -> LossValue:
    """0.5 * Dice loss + 0.5 * cross-entropy."""
    lp = ad.log_softmax(logits, axis=1)
    d = dice_loss(logits, labels, log_probs=lp)
    c = ce_loss(logits, labels, log_probs=lp)
    total = ad.scale(d, 0.5) + ad.scale(c, 0.5)
    return LossValue(total, d.item(), c.item())


# --------------------------------------------------------------------------
# schedule and optimisers
# --------------------------------------------------------------------------

def poly_lr(step: int, total: int, lr0: float = 1e-3, power: float = 0.9) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * (1.0 - step / total) ** power


class SGD:
    """SGD with optional momentum and decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], weight_decay=0.0, momentum=0.0):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.momentum = momentum
        self._buf = [None] * len(self.params)

    def step(self, lr: float):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.momentum:
                buf = g if self._buf[i] is None else self.momentum * self._buf[i] + g
                self._buf[i] = buf
                g = buf
            decay = p.data * (lr * self.weight_decay) if self.weight_decay else 0.0
            p.data = (p.data - lr * g - decay).astype(p.dtype, copy=False)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8, **_):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            decay = p.data * (lr * self.weight_decay) if self.weight_decay else 0.0
            p.data = (p.data - lr * upd - decay).astype(p.dtype, copy=False)


OPTIMIZERS = {"sgd": SGD, "adamw": AdamW}


# --------------------------------------------------------------------------
# patch sampling
# --------------------------------------------------------------------------

def sample_patch(volume: np.ndarray, labels: np.ndarray, patch, rng: np.random.Generator,
                 mirror: bool = False):
    """Random crop of ``patch`` from (C, D, H, W) ``volume`` and (D, H, W) ``labels``.

    With ``mirror`` each spatial axis is flipped with probability 1/2, the
    same way for image and labels.
    """
    dims = volume.shape[1:]
    if labels.shape != dims:
        raise ValueError(f"labels {labels.shape} do not match volume {dims}")
    if any(p > d for p, d in zip(patch, dims)):
        raise ValueError(f"patch {tuple(patch)} larger than volume {dims}")
    corner = [int(rng.integers(0, d - p + 1)) for p, d in zip(patch, dims)]
    sl = tuple(slice(c, c + p) for c, p in zip(corner, patch))
    img = volume[(slice(None),) + sl]
    lab = labels[sl]
    if mirror:
        for ax in range(3):
            if rng.random() < 0.5:
                img = flip(img, ax + 1)
                lab = flip(lab, ax)
    return np.ascontiguousarray(img), np.ascontiguousarray(lab)


def flip(a: np.ndarray, axis: int) -> np.ndarray:
    return np.flip(a, axis=axis)


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------

def _check_finite(loss: LossValue, model):
    if np.isfinite(loss.total.item()):
        return
    culprit = ad.first_nonfinite(loss.total)
    names = {id(p): n for n, p in model.named_parameters()}
    if isinstance(culprit, Tensor):
        where = f"parameter {names.get(id(culprit), culprit.name or '<input>')}"
    elif culprit is not None:
        where = f"op {culprit.op} in {culprit.scope or '<root>'}"
    else:
        where = "loss reduction"
    raise NonFiniteLossError(f"non-finite loss; first non-finite tensor: {where}")


def format_log_row(epoch: int, total: float, dice: float, ce: float, lr: float) -> str:
    return f"{epoch},{float(total)!r},{float(dice)!r},{float(ce)!r},{float(lr)!r}"


LOG_HEADER = "epoch,total,dice,ce,lr"


def train(model, data: Sequence[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig,
          on_epoch=None) -> list[str]:
    """Train ``model`` in place on (image (C,D,H,W), labels (D,H,W)) cases.

    Returns the loss log rows (header first); ``on_epoch`` receives each row.
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = OPTIMIZERS[cfg.optimizer](params, weight_decay=cfg.weight_decay, momentum=cfg.momentum)
    steps_per_epoch = -(-len(data) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    dtype = params[0].dtype
    rows = [LOG_HEADER]
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        sums = np.zeros(2)
        lr_epoch = poly_lr(step, total_steps, cfg.lr, cfg.poly_power)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            crops = [sample_patch(data[i][0], data[i][1], cfg.patch, rng, cfg.mirror) for i in idx]
            x = np.stack([c[0] for c in crops]).astype(dtype)
            y = np.stack([c[1] for c in crops])
            lr = poly_lr(step, total_steps, cfg.lr, cfg.poly_power)
            model.zero_grad()
            loss = combined_loss(model(x).logits, y)
            _check_finite(loss, model)
            ad.backward(loss.total)
            opt.step(lr)
            sums += (loss.dice, loss.ce)
            step += 1
        dice, ce = sums / steps_per_epoch
        # logged total is recomputed from the logged terms so the identity holds exactly
        row = format_log_row(epoch, 0.5 * dice + 0.5 * ce, dice, ce, lr_epoch)
        rows.append(row)
        log.info(row)
        if on_epoch is not None:
            on_epoch(row)
    return rows
