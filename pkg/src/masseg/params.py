"""Parameter containers: initialisers and flat name -> tensor registries."""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from .autodiff import Tensor


def he_normal(rng: np.random.Generator, shape, fan_in: int, name: str | None = None) -> Tensor:
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True, name=name)


def normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses, dicts and lists, yielding dotted names for every Tensor."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, dict):
        for k in sorted(obj):
            yield from named_tensors(obj[k], _join(prefix, str(k)))
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from named_tensors(v, _join(prefix, str(i)))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name
