"""Parameter-container base class and weight initializers.

A Module owns Tensors and sub-Modules as attributes.  Any Tensor attribute
whose name does not start with an underscore is a trainable parameter;
underscore-named tensors (positional-encoding tables and other constants)
are rebuilt from config and never checkpointed.  Enumeration order follows
attribute insertion order, so parameter names are stable across runs.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Rng, Tensor


class Module:
    """Base class for anything that owns trainable tensors."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def astype(self, dtype) -> None:
        """In-place dtype cast of all parameters (for gradient-check runs)."""
        for t in self.parameters():
            t.data = t.data.astype(dtype)


def glorot_uniform(rng: Rng, fan_in: int, fan_out: int, shape=None,
                   dtype=np.float32) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(shape, -limit, limit, dtype=dtype),
                  requires_grad=True)


def normal_init(rng: Rng, shape, scale: float = 0.02,
                dtype=np.float32) -> Tensor:
    return Tensor(rng.normal(shape, 0.0, scale, dtype=dtype),
                  requires_grad=True)


def zeros_init(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_init(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
