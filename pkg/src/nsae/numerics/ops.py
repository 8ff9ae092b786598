"""Differentiable tensor operations.

Elementwise arithmetic broadcasts like numpy. Network layers (conv,
transposed conv, pooling, batch-norm) work on NCHW arrays.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the tensor operand's dtype
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- arithmetic
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_node(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return make_node(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    out = ad ** exponent
    return make_node(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------- reductions
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / n)


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor; zero rows get a zero subgradient."""
    x = a.data
    out = np.sqrt((x * x).sum(axis=1))
    safe = np.where(out > 0, out, 1.0)

    def bw(g):
        return ((g / safe * (out > 0))[:, None] * x,)

    return make_node(out, (a,), bw)


# ---------------------------------------------------------------- shaping
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    """Matrix transpose of a 2-D tensor."""
    return make_node(a.data.T, (a,), lambda g: (g.T,))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    basic = isinstance(index, (slice, int)) or (
        isinstance(index, tuple) and all(isinstance(i, (slice, int)) for i in index))

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(np.asarray(a.data[index]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def pick(a: Tensor, labels: np.ndarray) -> Tensor:
    """Row-wise gather ``a[i, labels[i]]`` of a 2-D tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[rows, labels] = g
        return (full,)

    return make_node(a.data[rows, labels], (a,), bw)


# ---------------------------------------------------------------- activations
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation {kind!r}")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), bw)


# ---------------------------------------------------------------- layers
def linear_apply(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match {weight.shape[1]} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = [g @ wd.T, xd.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, bw)


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation of NCHW input with an FxCxkxk kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D operands, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W} (pad {padding})")
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    xd, kd = x.data, kernel.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    # columns laid out (C, kh, kw, B, Ho, Wo) so every fill is a contiguous-row copy
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=np.result_type(xd, kd))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(C * kh * kw, B * Ho * Wo)
    kmat = kd.reshape(F, -1)
    out = (kmat @ cols).reshape(F, B, Ho, Wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, F, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(F, -1)
        gk = (g2 @ cols.T).reshape(kd.shape)
        gcols = (kmat.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, bw)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
                     bias: Tensor | None = None) -> Tensor:
    """Transposed convolution; kernel is CxFxkxk (input channels first)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv_transpose2d expects 4-D operands, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    Ck, F, kh, kw = kernel.shape
    if Ck != C:
        raise DimensionError(f"conv_transpose2d: input has {C} channels, kernel expects {Ck}")
    Hf, Wf = (H - 1) * stride + kh, (W - 1) * stride + kw
    Ho, Wo = Hf - 2 * padding, Wf - 2 * padding
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"conv_transpose2d: non-positive output size {Ho}x{Wo}")
    xd, kd = x.data, kernel.data
    full = np.zeros((B, F, Hf, Wf), dtype=np.result_type(xd, kd))
    if stride >= kh and stride >= kw:
        # non-overlapping footprint: one matmul then an interleaving reshape
        y = np.tensordot(xd, kd, axes=([1], [0]))  # B,H,W,F,kh,kw
        blk = y.transpose(0, 3, 1, 4, 2, 5)  # B,F,H,kh,W,kw
        if stride == kh and stride == kw:
            full[:] = blk.reshape(B, F, H * kh, W * kw)
        else:
            for i in range(kh):
                for j in range(kw):
                    full[:, :, i:i + stride * H:stride, j:j + stride * W:stride] = blk[:, :, :, i, :, j]
    else:
        for i in range(kh):
            for j in range(kw):
                full[:, :, i:i + stride * H:stride, j:j + stride * W:stride] += np.tensordot(
                    xd, kd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
    out = full[:, :, padding:padding + Ho, padding:padding + Wo] if padding else full
    if bias is not None:
        out = out + bias.data.reshape(1, F, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        if padding:
            gf = np.zeros((B, F, Hf, Wf), dtype=g.dtype)
            gf[:, :, padding:padding + Ho, padding:padding + Wo] = g
        else:
            gf = g
        # gather windows of gf: (B, F, H, W, kh, kw)
        win = np.empty((B, F, H, W, kh, kw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                win[..., i, j] = gf[:, :, i:i + stride * H:stride, j:j + stride * W:stride]
        gx = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gk = np.tensordot(xd, win, axes=([0, 2, 3], [0, 2, 3]))
        grads = [np.ascontiguousarray(gx), gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, bw)


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    """Max over kxk windows; ties send the gradient to the first maximum in scan order."""
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW input, got {x.shape}")
    B, C, H, W = x.shape
    if H < k or W < k:
        raise DimensionError(f"maxpool2d: window {k} exceeds input {H}x{W}")
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    xd = x.data

    def window(a, p):
        i, j = divmod(p, k)
        return a[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]

    out = window(xd, 0).copy()
    for p in range(1, k * k):
        np.maximum(out, window(xd, p), out=out)

    def bw(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for p in range(k * k):
            hit = (window(xd, p) == out) & ~taken
            taken |= hit
            window(gx, p)[...] += g * hit
        return (gx,)

    return make_node(out, (x,), bw)


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class DegenerateBatchError(ValueError):
    """Batch statistics requested on a single-sample batch."""


def batchnorm_apply(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                    running_var: np.ndarray, mode: str = "train",
                    momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over all axes except 1.

    ``train`` normalizes with batch statistics and updates the running buffers
    in place; ``transductive`` uses batch statistics but leaves the buffers
    alone; ``eval`` uses the running buffers.
    """
    if mode not in ("train", "eval", "transductive"):
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    xd = x.data
    C = xd.shape[1]
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, C) + (1,) * (xd.ndim - 2)
    n = xd.size // C
    g_ = gamma.data.reshape(bshape)
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (xd - running_mean.reshape(bshape)) * inv
        out = xhat * g_ + beta.data.reshape(bshape)

        def bw_eval(g):
            return g * g_ * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_node(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw_eval)

    if n < 2 or (mode == "train" and xd.shape[0] < 2):
        raise DegenerateBatchError(f"batch statistics need at least 2 samples, got shape {xd.shape}")
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_ + beta.data.reshape(bshape)
    if mode == "train":
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(C) * (n / (n - 1))

    def bw(g):
        gxhat = g * g_
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_node(out, (x, gamma, beta), bw)
