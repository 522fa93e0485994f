"""Minimal dense tensors, fixed-op autodiff and the FFTN file format."""
from . import fftn
from .ops import (
    REDUCTIONS,
    Context,
    ConvParams,
    add,
    concat_channels,
    conv2d,
    conv2d_backward,
    conv2d_forward,
    conv_output_size,
    max_over_axis,
    maxpool2x,
    mean_over_axis,
    median_over_axis,
    mul,
    reduce_backward,
    reduce_forward,
    relu,
    scale,
    sigmoid,
    sum,
    upsample2x_nearest,
)
from .tensor import (
    ContextError,
    NumericError,
    Rng,
    ShapeError,
    Tensor,
    as_tensor,
    check_finite,
    default_dtype,
    grad_enabled,
    no_grad,
    precision,
)
