"""Minimal dense tensor engine with reverse-mode differentiation."""

from .tensor import (
    DTYPE,
    ContractError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    create,
    is_grad_enabled,
    no_grad,
    topological_order,
    zero_grads,
)
from .functional import (
    add,
    concat,
    einsum,
    exp,
    log,
    log_softmax,
    matmul,
    mean,
    moveaxis,
    mul,
    pad,
    relu,
    reshape,
    sigmoid,
    softmax_axis,
    sqrt,
    square,
    stack,
    sub,
    transpose,
)
from .functional import sum as sum_  # noqa: F401
from .conv import compact_scatter_slots, conv_nd, conv_out_extent, same_padding, scatter_slots, tconv_out_extent, transposed_conv_nd, unfold
from .optim import OptimizerState, adam_step, plateau_update
from .gradcheck import GradcheckReport, gradcheck, relative_error
