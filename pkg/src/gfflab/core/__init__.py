from . import io, ops
from .gradcheck import gradcheck
from .ops import (
    RunningStats,
    add,
    avg_pool_adaptive,
    batch_norm,
    bilinear_resample,
    concat_channels,
    conv2d,
    mean,
    mul,
    relu,
    sigmoid,
    slice_channels,
    softmax,
    softmax_cross_entropy,
)
from .tensor import Tensor, default_dtype, get_precision, no_grad, precision

__all__ = [
    "Tensor", "RunningStats", "add", "avg_pool_adaptive", "batch_norm", "bilinear_resample",
    "concat_channels", "conv2d", "default_dtype", "get_precision", "gradcheck", "io", "mean",
    "mul", "no_grad", "ops", "precision", "relu", "sigmoid", "slice_channels", "softmax",
    "softmax_cross_entropy",
]
