"""Minimal module tree: parameter ownership, naming, and a few layers."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def parameter(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def uniform(rng, bound, shape, dtype) -> Tensor:
    return parameter(rng.uniform(-bound, bound, shape), dtype)


class Module:
    """Parameters are Tensor attributes with ``requires_grad``; children are
    Module attributes or lists of them. Names follow attribute paths."""

    _name = ""

    def __call__(self, *args, **kwargs):
        with ad.scope(self._name or type(self).__name__):
            return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (Module, Tensor)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{key}.{i}", item
            elif hasattr(val, "tensors") and callable(val.tensors):
                # parameter bundles such as SSMHeadParams
                for sub, t in vars(val).items():
                    if isinstance(t, Tensor):
                        yield f"{key}.{sub}", t

    def named_parameters(self, prefix: str = ""):
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            else:
                yield from val.named_parameters(name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}.{key}" if prefix else key)

    def assign_names(self):
        for name, mod in self.named_modules():
            mod._name = name.rsplit(".", 1)[-1] if name else type(self).__name__
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Conv3d(Module):
    def __init__(self, c_in, c_out, kernel=1, stride=1, padding=0, groups=1,
                 bias=True, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        fan_in = (c_in // groups) * kernel ** 3
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = uniform(rng, bound, (c_out, c_in // groups, kernel, kernel, kernel), dtype)
        self.bias = uniform(rng, bound, (c_out,), dtype) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x):
        return ad.conv3d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class LayerNorm(Module):
    def __init__(self, channels, dtype=np.float32):
        self.gamma = parameter(np.ones(channels), dtype)
        self.beta = parameter(np.zeros(channels), dtype)

    def forward(self, x):
        return ad.layer_norm(x, self.gamma, self.beta)


class InstanceNorm(Module):
    def __init__(self, channels, dtype=np.float32):
        self.gamma = parameter(np.ones(channels), dtype)
        self.beta = parameter(np.zeros(channels), dtype)

    def forward(self, x):
        return ad.instance_norm(x, self.gamma, self.beta)


ACTIVATIONS = {"relu": ad.relu, "softplus": ad.softplus}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None
