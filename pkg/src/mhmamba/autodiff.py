"""Reverse-mode differentiation on a dynamic, append-only tape.

Each differentiable op builds its output with :func:`record`, which appends a
:class:`TapeNode` holding the op name, its input tensors and a closure that
maps the output gradient to input gradients. Node ids increase monotonically,
so sorting by id gives a topological order without graph search.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels as K

_ids = itertools.count()
_state = {"grad_enabled": True, "scope": []}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def scope(name: str):
    """Label nodes created inside with ``name`` (used in diagnostics)."""
    _state["scope"].append(name)
    try:
        yield
    finally:
        _state["scope"].pop()


def grad_enabled() -> bool:
    return _state["grad_enabled"]


@dataclass(eq=False)
class TapeNode:
    id: int
    op: str
    inputs: tuple
    backward: Callable
    shape: tuple
    scope: str = ""


class Tensor:
    """An ndarray plus the tape node that produced it (if any)."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" op={self.node.op}" if self.node else (" leaf" if self.requires_grad else "")
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if _is_scalar(other) else neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _is_scalar(x) -> bool:
    return not isinstance(x, (Tensor, np.ndarray)) and np.ndim(x) == 0


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def record(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``; tape it if any input needs grad."""
    out = Tensor(data)
    if _state["grad_enabled"] and any(t is not None and t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(next(_ids), op, tuple(inputs), backward, data.shape,
                            ".".join(_state["scope"]))
    return out


class GradientStore(dict):
    """Maps each leaf tensor to its accumulated gradient."""

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        return dict.__getitem__(self, id(leaf))[1]

    def __contains__(self, leaf) -> bool:
        return dict.__contains__(self, id(leaf))

    def leaves(self):
        return [v[0] for v in self.values()]


def backward(loss: Tensor, accumulate: bool = True) -> GradientStore:
    """Propagate d(loss)/d(leaf) to every leaf reachable from ``loss``.

    Leaf gradients are also written to ``leaf.grad`` (added to any existing
    value when ``accumulate`` is true).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    store = GradientStore()
    if not loss.requires_grad:
        return store

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node is None or t.node.id in nodes:
            continue
        nodes[t.node.id] = t
        for inp in t.node.inputs:
            if inp is not None and inp.requires_grad:
                if inp.node is not None and inp.node.id >= t.node.id:
                    raise RuntimeError(f"tape cycle: node {t.node.op} consumes a later node {inp.node.op}")
                stack.append(inp)

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(id(t), None)
        if g is None:
            continue
        in_grads = t.node.backward(g)
        for inp, gi in zip(t.node.inputs, in_grads):
            if inp is None or gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise RuntimeError(
                    f"{t.node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
            key = id(inp)
            grads[key] = gi if key not in grads else grads[key] + gi
            if inp.node is None:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = grads[key]
        store[key] = (leaf, g)
        if accumulate and leaf.grad is not None:
            leaf.grad = leaf.grad + g
        else:
            leaf.grad = g
    return store


def first_nonfinite(t: Tensor) -> TapeNode | Tensor | None:
    """Earliest tape node (or leaf) reachable from ``t`` holding a non-finite value."""
    seen, stack, found = set(), [t], []
    while stack:
        x = stack.pop()
        if id(x) in seen:
            continue
        seen.add(id(x))
        if not np.all(np.isfinite(x.data)):
            found.append(x)
        if x.node is not None:
            stack.extend(i for i in x.node.inputs if i is not None)
    if not found:
        return None
    leaves = [x for x in found if x.node is None]
    if leaves:
        return leaves[0]
    return min((x.node for x in found), key=lambda n: n.id)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (m, n) in enumerate(zip(g.shape, shape)) if n == 1 and m != 1)
    return g.sum(axis=axes, keepdims=True)


def _needs(t):
    return t is not None and t.requires_grad


# --------------------------------------------------------------------------
# arithmetic
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if _is_scalar(b):
        return record(a.data + b, "add_scalar", (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    K.check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, "add", (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    a, b = as_tensor(a), as_tensor(b)
    K.check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if _needs(a) else None,
                _unbroadcast(g * ad, bd.shape) if _needs(b) else None)
    return record(ad * bd, "mul", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return record(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, "scale", (a,), lambda g: (g * c,))


def one_minus(a: Tensor) -> Tensor:
    return record(1.0 - a.data, "one_minus", (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record(np.log(ad), "log", (a,), lambda g: (g / ad,))


def sigmoid(a: Tensor) -> Tensor:
    s = K.sigmoid(a.data)
    return record(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return record(K.relu(ad), "relu", (a,), lambda g: (g * (ad > 0),))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    return record(K.softplus(ad), "softplus", (a,), lambda g: (g * K.sigmoid(ad),))


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return record(np.asarray(out), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return record(a.data.transpose(axes), "transpose", (a,),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(out)
    return record(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), bw)


def take(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous copy of ``a[..., start:stop, ...]`` along ``axis``."""
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[sl] = g
        return (full,)
    return record(np.ascontiguousarray(a.data[sl]), "take", (a,), bw)


def split(a: Tensor, parts: int, axis: int = 1) -> list[Tensor]:
    n = a.shape[axis]
    if n % parts:
        raise K.ShapeError(f"axis of size {n} does not split into {parts} equal parts", axis=str(axis))
    w = n // parts
    return [take(a, axis, i * w, (i + 1) * w) for i in range(parts)]


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; every operand index must appear in the other operand or the output."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_idx = spec.split("->")
    ia, ib = ins.split(",")
    for own, other in ((ia, ib), (ib, ia)):
        for ch in own:
            if ch not in other and ch not in out_idx:
                raise ValueError(f"einsum {spec!r}: index {ch!r} would need broadcasting in backward")
    ad, bd = a.data, b.data

    def bw(g):
        return (np.einsum(f"{out_idx},{ib}->{ia}", g, bd) if _needs(a) else None,
                np.einsum(f"{out_idx},{ia}->{ib}", g, ad) if _needs(b) else None)
    return record(np.einsum(spec, ad, bd), "einsum", (a, b), bw)


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    ad = a.data
    shifted = ad - ad.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return record(out, "log_softmax", (a,), bw)


# --------------------------------------------------------------------------
# volume kernels
# --------------------------------------------------------------------------

def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    xd, wd = x.data, weight.data
    out = K.conv3d(xd, wd, None if bias is None else bias.data, stride, padding, groups)

    def bw(g):
        gx, gw = K.conv3d_backward(g, xd, wd, stride, padding, groups,
                                   need_x=_needs(x), need_w=_needs(weight))
        gb = g.sum(axis=(0, 2, 3, 4)) if _needs(bias) else None
        return gx, gw, gb
    return record(out, "conv3d", (x, weight, bias), bw)


def sobel3d(x: Tensor) -> Tensor:
    xd = x.data
    comps = K.sobel_components(xd)
    mag = np.sqrt(sum(c * c for c in comps))
    return record(mag, "sobel3d", (x,), lambda g: (K.sobel3d_backward(g, xd, comps, mag),))


def _norm(x, gamma, beta, axes, op, eps):
    out, xhat, rstd = K._normalize(x.data, gamma.data, beta.data, axes, eps)

    def bw(g):
        return K.norm_backward(g, xhat, rstd, gamma.data, axes)
    return record(out, op, (x, gamma, beta), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = K.NORM_EPS) -> Tensor:
    return _norm(x, gamma, beta, (1,), "layer_norm", eps)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = K.NORM_EPS) -> Tensor:
    return _norm(x, gamma, beta, (2, 3, 4), "instance_norm", eps)


def pool_stats(x: Tensor, kind: str) -> Tensor:
    xd = x.data
    out = K.pool_stats(xd, kind)
    return record(out, f"pool_{kind}", (x,), lambda g: (K.pool_stats_backward(g, xd, out, kind),))


def resize_trilinear(x: Tensor, out_dims) -> Tensor:
    in_dims = x.shape[2:]
    return record(K.resize_trilinear(x.data, out_dims), "resize_trilinear", (x,),
                  lambda g: (K.resize_trilinear_adjoint(g, in_dims),))


def upsample2(x: Tensor) -> Tensor:
    return resize_trilinear(x, tuple(2 * n for n in x.shape[2:]))


def linear_recurrence(a: Tensor, u: Tensor, chunk: int | None = None) -> Tensor:
    """h_t = a_t * h_{t-1} + u_t along axis 1, h_{-1} = 0."""
    ad = a.data
    h = K.linear_scan(ad, u.data, chunk)

    def bw(g):
        lam = K.linear_scan_adjoint(g, ad, chunk)
        ga = None
        if _needs(a):
            ga = np.zeros_like(ad)
            ga[:, 1:] = lam[:, 1:] * h[:, :-1]
        return ga, lam
    return record(h, "linear_recurrence", (a, u), bw)


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------

def relative_error(analytic, numeric) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
               samples: int | None = None, rng: np.random.Generator | None = None,
               largest: bool = False) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is re-evaluated with entries of ``inputs`` perturbed in place. With
    ``samples`` set, only that many coordinates per input are differenced (for
    large parameter sets): chosen at random, or with ``largest`` the ones with
    the biggest analytic gradient, where the difference quotient is not swamped
    by rounding noise.
    """
    for t in inputs:
        t.data = np.require(t.data, requirements="C")  # keeps 0-d scalars 0-d
        t.requires_grad = True
        t.grad = None
    loss = f()
    store = backward(loss, accumulate=False)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in inputs:
        analytic = store[t] if t in store else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        if samples is None or samples >= flat.size:
            coords = range(flat.size)
        elif largest:
            coords = np.argsort(-np.abs(analytic.reshape(-1)), kind="stable")[:samples]
        else:
            coords = rng.choice(flat.size, size=samples, replace=False)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, float(relative_error(analytic.reshape(-1)[i], numeric)))
    return worst


def directional_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6,
                      rng: np.random.Generator | None = None) -> float:
    """Relative error of the tape directional derivative along one random
    direction that moves every entry of every input at once."""
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    store = backward(f(), accumulate=False)
    dirs = [rng.standard_normal(t.shape).astype(t.dtype) for t in inputs]
    analytic = sum(float(np.vdot(store[t], v)) for t, v in zip(inputs, dirs) if t in store)
    origs = [t.data.copy() for t in inputs]
    vals = []
    with no_grad():
        for sign in (1.0, -1.0):
            for t, o, v in zip(inputs, origs, dirs):
                t.data = o + sign * h * v
            vals.append(f().item())
    for t, o in zip(inputs, origs):
        t.data = o
    return float(relative_error(analytic, (vals[0] - vals[1]) / (2 * h)))
