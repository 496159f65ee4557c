"""Parameterized layers and the declarative layer-spec shape algebra."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor, default_dtype

LAYER_KINDS = ("conv2d", "batch_norm", "relu", "max_pool2d", "linear", "residual_block", "concat_channels")


@dataclass(frozen=True)
class LayerSpec:
    """One row of an architecture table.

    ``kind`` selects which of the remaining fields matter: conv2d uses
    in/out channels, kernel, stride and padding; residual_block uses in/out
    channels and stride; max_pool2d uses window and stride; linear uses
    in/out channels as feature widths; concat_channels uses ``in_channels``
    as the width of the appended block.
    """

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    window: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        k = self.kind
        if k in ("relu", "batch_norm"):
            return shape
        if k == "linear":
            if shape[-1] != self.in_channels:
                raise ShapeError(f"{self.name or k}: expects width {self.in_channels}, got {shape}")
            return shape[:-1] + (self.out_channels,)
        if k == "concat_channels":
            return (shape[0] + self.in_channels,) + shape[1:]
        c, h, w = shape[-3:]
        if c != self.in_channels:
            raise ShapeError(f"{self.name or k}: expects {self.in_channels} channels, got {shape}")
        if k == "conv2d":
            ho = F.conv_output_size(h, self.kernel, self.stride, self.padding)
            wo = F.conv_output_size(w, self.kernel, self.stride, self.padding)
            return shape[:-3] + (self.out_channels, ho, wo)
        if k == "residual_block":
            ho = F.conv_output_size(h, 3, self.stride, 1)
            wo = F.conv_output_size(w, 3, self.stride, 1)
            return shape[:-3] + (self.out_channels, ho, wo)
        # max_pool2d
        if (h - self.window) % self.stride or (w - self.window) % self.stride:
            raise ShapeError(f"{self.name or k}: {shape} not divisible by window {self.window}")
        return shape[:-3] + (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)


def chain_shapes(specs, shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Push ``shape`` through ``specs`` and return every intermediate shape."""
    out = []
    for s in specs:
        shape = s.output_shape(shape)
        out.append(shape)
    return out


class Module:
    training: bool = True

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray) and name.startswith("running_"):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        params = dict(self.named_parameters())
        for name, arr in state.items():
            if own[name].shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {own[name].shape}")
            if name in params:
                params[name].data = np.array(arr, dtype=params[name].dtype)
            else:
                own[name][...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int | None = None, *, rng):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = _kaiming(rng, (cout, cin, kernel, kernel), cin * kernel * kernel)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=default_dtype())
        self.running_var = np.ones(channels, dtype=default_dtype())

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class Linear(Module):
    def __init__(self, din: int, dout: int, *, rng):
        self.weight = _kaiming(rng, (dout, din), din)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class ConvReluBN(Module):
    """Conv -> ReLU -> BatchNorm, in that order."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, *, rng):
        self.conv = Conv2d(cin, cout, kernel, stride, rng=rng)
        self.bn = BatchNorm(cout)

    def forward(self, x):
        return self.bn(F.relu(self.conv(x)))


class FcReluBN(Module):
    def __init__(self, din: int, dout: int, *, rng):
        self.fc = Linear(din, dout, rng=rng)
        self.bn = BatchNorm(dout)

    def forward(self, x):
        return self.bn(F.relu(self.fc(x)))


class ResidualBlock(Module):
    """Basic two-conv residual block; a 1x1 strided projection carries the skip
    path whenever the channel count or resolution changes."""

    def __init__(self, cin: int, cout: int, stride: int = 1, *, rng):
        self.conv1 = Conv2d(cin, cout, 3, stride, rng=rng)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, rng=rng)
        self.bn2 = BatchNorm(cout)
        self.proj = None
        self.proj_bn = None
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, stride, padding=0, rng=rng)
            self.proj_bn = BatchNorm(cout)

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return F.relu(y + skip)


def build_layer(spec: LayerSpec, rng: np.random.Generator) -> Module:
    """Instantiate the module for one architecture-table row."""
    if spec.kind == "conv2d":
        return ConvReluBN(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, rng=rng)
    if spec.kind == "residual_block":
        return ResidualBlock(spec.in_channels, spec.out_channels, spec.stride, rng=rng)
    if spec.kind == "linear":
        return FcReluBN(spec.in_channels, spec.out_channels, rng=rng)
    raise ValueError(f"no standalone module for layer kind {spec.kind!r}")


def to_dtype(module: Module, dtype=None) -> Module:
    """Cast every parameter of ``module`` to ``dtype`` (defaults to the current default)."""
    dtype = np.dtype(dtype or default_dtype())
    for p in module.parameters():
        p.data = p.data.astype(dtype)
    for m in module.modules():
        if isinstance(m, BatchNorm):
            m.running_mean = m.running_mean.astype(dtype)
            m.running_var = m.running_var.astype(dtype)
    return module
