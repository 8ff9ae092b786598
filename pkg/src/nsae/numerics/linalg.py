"""Singular values of small matrices by cyclic Jacobi iteration."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class ConvergenceError(ArithmeticError):
    pass


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, sorted in decreasing order.

    Sweeps over all (p, q) pairs, zeroing each off-diagonal entry with a
    plane rotation, until the off-diagonal Frobenius mass falls below
    ``tol`` times the total Frobenius norm.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {a.shape}")
    total = np.sqrt((a * a).sum())
    if n < 2 or total == 0.0:
        return np.sort(np.diag(a))[::-1]
    for sweep in range(max_sweeps + 1):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol * total:
            return np.sort(np.diag(a))[::-1]
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) < 1e-100 * abs(diff):
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = diff / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e60:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
    raise ConvergenceError(
        f"Jacobi eigensolver did not converge after {max_sweeps} sweeps "
        f"(off-diagonal norm {off:.3e}, target {tol * total:.3e})")


def singular_values(m, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Non-increasing singular values of a BxD matrix (min(B, D) of them).

    Forward only: computed from the eigenvalues of the smaller Gram matrix.
    """
    m = m.data if isinstance(m, Tensor) else np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"singular_values expects a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("singular_values: non-finite entries")
    m = m.astype(np.float64)
    gram = m @ m.T if m.shape[0] <= m.shape[1] else m.T @ m
    ev = jacobi_eigh(gram, tol=tol, max_sweeps=max_sweeps)
    return np.sqrt(np.clip(ev, 0.0, None))
