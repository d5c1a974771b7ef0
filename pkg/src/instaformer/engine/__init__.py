"""Minimal numpy tensor library with reverse-mode differentiation."""

from . import ops
from .gradcheck import analytic_grad, grad_check, numeric_grad
from .ops import (
    abs,
    add,
    as_tensor,
    avg_pool2x2,
    bilinear_sample,
    concat,
    conv2d,
    conv_transpose2d,
    div,
    exp,
    gelu,
    leaky_relu,
    log,
    logsumexp,
    matmul,
    mean,
    mul,
    pad2d,
    permute,
    primitive_forward,
    relu,
    reshape,
    slice,
    softmax,
    softplus,
    sqrt,
    stack,
    sub,
    sum,
    swapaxes,
    tanh,
    upsample_nearest2x,
    var,
)
from .tensor import (
    EngineError,
    NonFiniteError,
    ShapeError,
    TapeError,
    Tensor,
    UnknownOpError,
    backward,
    debug_mode,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)
