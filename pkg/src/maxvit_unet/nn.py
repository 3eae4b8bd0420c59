"""Parameter containers and the basic layers built on :mod:`maxvit_unet.ops`.

A :class:`Module` discovers its state from attributes: ``Tensor`` attributes are
parameters, ``np.ndarray`` attributes are buffers, and ``Module`` attributes (or
lists of them) are children. Underscore-prefixed attributes are skipped. Names
follow attribute paths, e.g. ``encoder.0.blocks.1.mbconv.expand.weight``.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tensor


class Module:
    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and not name.startswith("_"):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray) and not name.startswith("_"):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}", arr.shape, p.shape)
            p.data = arr.astype(p.dtype).copy()
        for name, b in buffers.items():
            arr = np.asarray(state[name])
            if arr.shape != b.shape:
                raise ShapeError(f"buffer {name}", arr.shape, b.shape)
            b[...] = arr

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer to ``dtype`` in place."""
        for _, m in self.named_modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
                elif isinstance(value, np.ndarray) and np.issubdtype(value.dtype, np.floating):
                    setattr(m, name, value.astype(dtype))
        return self


# ------------------------------------------------------------ initializers --


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True, dtype=dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    """Normal(0, std) truncated to two standard deviations by resampling."""
    values = rng.normal(0.0, std, size=shape)
    bad = np.abs(values) > 2 * std
    while bad.any():
        values[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(values) > 2 * std
    return Tensor(values, requires_grad=True, dtype=dtype)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


# ------------------------------------------------------------------ layers --


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, kernel: int = 1, stride: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = True, dtype=np.float32):
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = cin // groups * kernel * kernel
        self.weight = he_normal(rng, (cout, cin // groups, kernel, kernel), fan_in, dtype)
        self.bias = zeros((cout,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose2d(Module):
    def __init__(self, rng, cin: int, cout: int, kernel: int = 2, stride: int = 2, bias: bool = True,
                 dtype=np.float32):
        self.stride = stride
        self.weight = he_normal(rng, (cin, cout, kernel, kernel), cin * kernel * kernel // (stride * stride), dtype)
        self.bias = zeros((cout,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.momentum, self.eps = momentum, eps
        self.weight = ones((channels,), dtype)
        self.bias = zeros((channels,), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                               self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float32):
        self.eps = eps
        self.weight = ones((channels,), dtype)
        self.bias = zeros((channels,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.weight, self.bias, self.eps)


class Linear(Module):
    def __init__(self, rng, cin: int, cout: int, bias: bool = True, std: float = 0.02, dtype=np.float32):
        self.weight = trunc_normal(rng, (cin, cout), std, dtype)
        self.bias = zeros((cout,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)
