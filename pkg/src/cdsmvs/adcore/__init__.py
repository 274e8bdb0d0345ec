"""Small reverse-mode differentiation engine over float64 numpy arrays."""

from .checkpoint import load_checkpoint, save_checkpoint
from .conv import conv2d, conv3d, downsample
from .functional import (
    abs,
    add,
    clamp,
    clamp_min,
    concat,
    div,
    exp,
    getitem,
    inner_product_channels,
    leaky_relu,
    log,
    log_sigmoid,
    log_softmax,
    mean,
    mul,
    neg,
    reshape,
    sigmoid,
    softmax,
    softmax_temperature,
    sqrt,
    square,
    stack,
    sub,
    sum,
    transpose,
    upsample_bilinear,
)
from .gradcheck import gradcheck, numerical_grad
from .module import HE_GAIN, Module, Param, sgd_step, uniform_init
from .sampling import grid_sample_bilinear, sample_validity
from .tensor import Tensor, as_tensor, backward, grad_enabled, no_grad
