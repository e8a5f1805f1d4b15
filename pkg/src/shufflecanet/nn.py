"""Minimal layer containers over the tensor ops."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Holds parameters, buffers and child modules in attribute order."""

    training = True

    def __init__(self):
        self._buffer_names: list[str] = []

    def register_buffer(self, name: str, value: np.ndarray):
        setattr(self, name, value)
        self._buffer_names.append(name)

    def children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)) and v and all(isinstance(m, Module) for m in v):
                for i, m in enumerate(v):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = ""):
        for name, v in vars(self).items():
            if isinstance(v, Parameter):
                yield prefix + name, v
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_state_dict(self, state: dict, strict: bool = True):
        own = self.state_dict()
        if strict:
            missing = [k for k in own if k not in state]
            extra = [k for k in state if k not in own]
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in self.named_parameters():
            if name in state:
                _copy_into(name, p.data, state[name])
        for name, b in self.named_buffers():
            if name in state:
                _copy_into(name, b, state[name])
        return self

    def astype(self, dtype):
        """Convert parameters and buffers in place (e.g. float64 for gradient checks)."""
        for m in self.modules():
            for name, v in vars(m).items():
                if isinstance(v, Parameter):
                    v.data = v.data.astype(dtype)
            for name in getattr(m, "_buffer_names", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _copy_into(name, dst, src):
    src = np.asarray(src)
    if src.shape != dst.shape:
        raise ValueError(f"tensor {name!r}: shape {src.shape} does not match expected {dst.shape}")
    dst[...] = src


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=1, stride=1, groups=1, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.pad = kernel // 2
        self.groups = groups
        fan_in = (in_ch // groups) * kernel * kernel
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (out_ch, in_ch // groups, kernel, kernel)).astype(dtype))
        self.bias = Parameter(rng.uniform(-bound, bound, out_ch).astype(dtype), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-3, momentum=0.03, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype), decay=False)
        self.beta = Parameter(np.zeros(channels, dtype), decay=False)
        self.register_buffer("running_mean", np.zeros(channels, dtype))
        self.register_buffer("running_var", np.ones(channels, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class Identity(Module):
    def forward(self, x):
        return x
