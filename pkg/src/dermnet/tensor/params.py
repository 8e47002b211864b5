"""Named, group-tagged trainable tensors and the container models build on."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .core import Tensor

GROUPS = ("seg", "backbone_full", "backbone_crop", "head")


@dataclass(eq=False)
class Parameter:
    name: str
    tensor: Tensor
    group: str
    trainable: bool = True

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"unknown parameter group {self.group!r}")
        self.tensor.requires_grad = self.trainable

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        self.tensor.requires_grad = self.trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


class ParameterSet:
    """Ordered name -> Parameter mapping with unique names."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ValueError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def new(self, name: str, data: np.ndarray, group: str) -> Tensor:
        return self.add(Parameter(name, Tensor(data), group)).tensor

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Parameter]:
        return [p for p in self if p.trainable]

    def count(self) -> int:
        """Total number of scalar values."""
        return int(sum(p.tensor.size for p in self))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self}

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            p = self._params[name]
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.tensor.data = arr.astype(p.tensor.dtype, copy=True)

    def astype(self, dtype) -> None:
        """Convert every tensor in place (float64 for gradient checks)."""
        for p in self:
            p.tensor.data = p.tensor.data.astype(dtype)
            p.tensor.grad = None

    def zero_grad(self) -> None:
        for p in self:
            p.tensor.grad = None


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
