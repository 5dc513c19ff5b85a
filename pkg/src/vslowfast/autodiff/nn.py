"""Layers holding trainable parameters and a registry to walk them by name."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Parameter container. Child modules and parameters are found by attribute walk."""

    training = True

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
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

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
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, target in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != target.shape:
                raise ValueError(f"{name}: shape {value.shape} != expected {target.shape}")
            target[...] = value


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int = 0, dilation: int = 1, bias: bool = True):
        bound = 1.0 / np.sqrt(in_ch * k * k)
        self.weight = _param(rng.uniform(-bound, bound, (out_ch, in_ch, k, k)))
        self.bias = _param(rng.uniform(-bound, bound, out_ch)) if bias else None
        self.stride, self.pad, self.dilation = stride, pad, dilation

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.dilation)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int = 0, bias: bool = True):
        bound = 1.0 / np.sqrt(out_ch * k * k)
        self.weight = _param(rng.uniform(-bound, bound, (in_ch, out_ch, k, k)))
        self.bias = _param(rng.uniform(-bound, bound, out_ch)) if bias else None
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        self.weight = _param(np.ones(channels))
        self.bias = _param(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                               self.training)
