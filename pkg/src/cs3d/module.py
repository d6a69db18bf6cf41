"""Minimal layer container: parameter registry, buffers, train/eval mode, and
symbolic profiling hooks used by the FLOPs counter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import Tensor


@dataclass
class ProfileRow:
    layer: str
    kind: str
    out_shape: tuple[int, ...]
    params: int
    macs: int
    flops: int


def elems(shape) -> int:
    return int(np.prod(shape, dtype=np.int64))


class Module:
    training = True

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def own_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value

    def own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.own_parameters():
            yield prefix + name, t
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self.own_buffers():
            yield prefix + name, arr
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        rows, out = self.profile(in_shape, "")
        return out

    def profile(self, in_shape: tuple[int, ...], name: str) -> tuple[list[ProfileRow], tuple[int, ...]]:
        """Per-primitive cost rows and the output shape for an input of ``in_shape``."""
        raise NotImplementedError


def n_params(*tensors) -> int:
    return sum(t.size for t in tensors if t is not None)
