"""Minimal reverse-mode autodiff over numpy arrays."""

from .tensor import (
    MacCounter,
    Tensor,
    absolute,
    add,
    as_tensor,
    concat,
    conv2d,
    count_macs,
    div,
    exp,
    gelu,
    getitem,
    is_grad_enabled,
    layer_norm,
    linear,
    log,
    make_op,
    matmul,
    mul,
    no_grad,
    pad,
    permute,
    pixel_shuffle,
    pixel_unshuffle,
    power,
    prelu,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    split,
    sqrt,
    sub,
    swish,
    take_rows,
    tally_macs,
    tanh,
    variance,
)
from .spectral import istft
from .gradcheck import check_gradients, numerical_grad, relative_error

__all__ = [name for name in dir() if not name.startswith("_")]
