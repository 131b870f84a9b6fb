"""Small module system over :mod:`cloven.autodiff`: parameters, layers, MLPs."""

from __future__ import annotations

from typing import Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Rng, Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Base class; parameters, buffers and submodules are found by attribute walk.

    Attribute insertion order fixes the parameter order, so two modules built
    from the same config enumerate parameters identically.
    """

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Module, Parameter)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(prefix=name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffers", ()):
            yield f"{prefix}{key}", getattr(self, key)
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix=f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))


class Linear(Module):
    """Dense layer ``x @ W + b`` with torch-style uniform fan-in init."""

    def __init__(self, in_features: int, out_features: int, rng: Rng):
        if in_features < 1 or out_features < 1:
            raise ContractError(f"Linear: widths must be >= 1, got {in_features}->{out_features}")
        bound = 1.0 / np.sqrt(in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(rng.uniform(-bound, bound, (in_features, out_features)))
        self.bias = Parameter(rng.uniform(-bound, bound, (out_features,)))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ContractError(f"Linear: expected {self.in_features} input columns, got shape {x.shape}")
        return x @ self.weight + self.bias

    def zero_(self) -> None:
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Parameter(np.ones(features))
        self.bias = Parameter(np.zeros(features))
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.batchnorm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Dropout(Module):
    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ContractError(f"Dropout: p must lie in [0, 1), got {p}")
        self.p = p

    def forward(self, x: Tensor, rng: Optional[Rng]) -> Tensor:
        return ad.dropout(x, self.p, self.training, rng)


class MLP(Module):
    """Stack of dense layers with ReLU between them; the last layer is linear."""

    def __init__(self, widths: Sequence[int], rng: Rng, final_activation: bool = False):
        widths = list(widths)
        if len(widths) < 2:
            raise ContractError("MLP: need at least input and output widths")
        self.widths = widths
        self.final_activation = final_activation
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_activation:
                x = ad.relu(x)
        return x


def linear_param_count(widths: Sequence[int]) -> int:
    """Closed-form parameter count of an :class:`MLP` with these widths."""
    return int(np.sum([a * b + b for a, b in zip(widths[:-1], widths[1:])]))
