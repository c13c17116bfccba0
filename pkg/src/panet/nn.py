"""Parameter containers and the few layer types the model needs."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, relu


class Parameter(Tensor):
    """A trainable leaf tensor; ``weight_decay`` marks whether L2 decay applies."""

    __slots__ = ("weight_decay",)

    def __init__(self, data, weight_decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.weight_decay = weight_decay

    @property
    def value(self) -> Tensor:
        return self


class Module:
    """Base class that discovers parameters, buffers and submodules by attribute."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffers", ()):
            yield f"{prefix}{key}", getattr(self, key)
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
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
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=float)
        for name in buffers:
            owner, attr = self._resolve(name)
            setattr(owner, attr, np.array(state[name], dtype=float))

    def _resolve(self, dotted: str) -> tuple["Module", str]:
        obj = self
        *path, attr = dotted.split(".")
        for part in path:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        return obj, attr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, std: float | None = None):
        fan_in = cin * k * k
        shape = (cout, cin, k, k)
        data = he_normal(rng, shape, fan_in) if std is None else rng.standard_normal(shape) * std
        self.weight = Parameter(data)
        self.bias = Parameter(np.zeros(cout), weight_decay=False)
        self.stride = stride
        self.pad = (k - 1) // 2

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, k: int = 2, pad: int = 0):
        self.weight = Parameter(he_normal(rng, (cin, cout, k, k), cin))
        self.bias = Parameter(np.zeros(cout), weight_decay=False)
        self.pad = pad

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, 2, self.pad)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, std: float | None = None):
        data = he_normal(rng, (dout, din), din) if std is None else rng.standard_normal((dout, din)) * std
        self.weight = Parameter(data)
        self.bias = Parameter(np.zeros(dout), weight_decay=False)

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


def count_param_layers(module: Module) -> int:
    """Number of weighted (conv / linear / deconv) layers inside ``module``."""
    return sum(isinstance(m, (Conv2d, Linear, ConvTranspose2d)) for m in module.modules())


__all__ = [
    "Conv2d",
    "ConvTranspose2d",
    "Linear",
    "Module",
    "Parameter",
    "count_param_layers",
    "relu",
]
