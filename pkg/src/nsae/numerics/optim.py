from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


class SGD:
    """SGD with heavy-ball momentum; weight decay is added to the gradient
    before the momentum update:

        g' = g + wd * p;  v = momentum * v + g';  p = p - lr * v
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v


def sgd_step(params: list[Tensor], grads: list[np.ndarray], state: SGD) -> None:
    """Functional form: load ``grads`` into ``params`` and apply one update."""
    for p, g in zip(params, grads):
        p.grad = g
    state.step()
