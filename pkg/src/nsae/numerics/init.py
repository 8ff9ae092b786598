from __future__ import annotations

import numpy as np

from .tensor import Tensor


def fan_in_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator,
                   dtype=np.float32, name: str | None = None) -> Tensor:
    """U(-b, b) with b = sqrt(6 / fan_in) (He-uniform)."""
    bound = np.sqrt(6.0 / fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape, dtype=np.float32, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def ones(shape, dtype=np.float32, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, name=name)
