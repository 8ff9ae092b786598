"""Tensor arithmetic, reverse-mode autodiff, layers, SVD and SGD."""

from .linalg import ConvergenceError, jacobi_eigh, singular_values
from .ops import (
    DegenerateBatchError,
    activation,
    batchnorm_apply,
    concat,
    conv2d,
    conv_transpose2d,
    exp,
    flatten,
    linear_apply,
    log,
    log_softmax,
    matmul,
    maxpool2d,
    mean,
    pick,
    relu,
    reshape,
    row_norm,
    sigmoid,
    sqrt,
    transpose,
)
from .optim import SGD, sgd_step
from .tensor import DimensionError, Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "ConvergenceError", "DegenerateBatchError", "DimensionError", "SGD", "Tensor",
    "activation", "as_tensor", "backward", "batchnorm_apply", "concat", "conv2d",
    "conv_transpose2d", "exp", "flatten", "grad_enabled", "jacobi_eigh", "linear_apply",
    "log", "log_softmax", "matmul", "maxpool2d", "mean", "no_grad", "pick", "relu",
    "reshape", "row_norm", "sgd_step", "sigmoid", "singular_values", "sqrt", "transpose",
]
