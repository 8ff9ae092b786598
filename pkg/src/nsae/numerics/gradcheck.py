"""Central finite-difference checks for the autodiff tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def _as_scalar(out: Tensor, proj: np.ndarray | None) -> Tensor:
    if out.data.size == 1:
        return out.reshape(())
    return (out * Tensor(proj)).sum()


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], wrt: int,
                 h: float = 1e-4, proj: np.ndarray | None = None,
                 coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``inputs[wrt]`` (all coords or a subset)."""
    x = inputs[wrt].data
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if coords is None else coords
    out = np.zeros(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = _as_scalar(fn(*inputs), proj).item()
        flat[i] = orig - h
        fm = _as_scalar(fn(*inputs), proj).item()
        flat[i] = orig
        out[n] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
                    seed: int = 0, max_coords: int | None = None) -> list[float]:
    """Relative error between tape and finite-difference gradients for every
    input with ``requires_grad``. Non-scalar outputs are reduced with a fixed
    random projection. ``max_coords`` samples a subset of coordinates per input.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    proj = None if out.data.size == 1 else rng.standard_normal(out.shape)
    for t in inputs:
        t.grad = None
    backward(_as_scalar(out, proj))
    errors = []
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1)
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            coords = rng.choice(t.data.size, size=max_coords, replace=False)
            analytic = analytic[coords]
        numeric = numeric_grad(fn, inputs, k, h=h, proj=proj, coords=coords)
        errors.append(relative_error(analytic, numeric))
    return errors
