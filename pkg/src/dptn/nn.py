"""Parameter containers and the layers the networks are built from."""
from __future__ import annotations

import math

import numpy as np

from dptn import autograd as ag
from dptn.autograd import Tensor


class Module:
    """Holds parameters and submodules as attributes; names follow attribute paths."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = flag

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng, shape, fan_in, slope=0.2, dtype=np.float64):
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def param(data):
    return Tensor(data, requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k=3, stride=1, pad=None, bias=True, dtype=np.float64):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.w = param(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype=dtype))
        self.b = param(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return ag.conv2d(x, self.w, self.b, self.stride, self.pad)


class InstanceNorm(Module):
    def __init__(self, channels, eps=1e-5, dtype=np.float64):
        self.eps = eps
        self.gamma = param(np.ones(channels, dtype=dtype))
        self.beta = param(np.zeros(channels, dtype=dtype))

    def forward(self, x):
        return ag.instance_norm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    """Right-multiplying affine map on the last axis: ``x @ w + b``."""

    def __init__(self, rng, din, dout, bias=True, dtype=np.float64):
        self.w = param(kaiming_uniform(rng, (din, dout), din, dtype=dtype))
        self.b = param(np.zeros(dout, dtype=dtype)) if bias else None

    def forward(self, x):
        y = ag.matmul(x, self.w)
        return y if self.b is None else ag.add(y, self.b)
