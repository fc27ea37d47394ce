from .tensor import (
    NumericsError,
    ShapeError,
    Tensor,
    abs_,
    add,
    channel_max,
    clip,
    elementwise,
    grad_enabled,
    log,
    make_op,
    mean_,
    mul,
    no_grad,
    relu,
    sigmoid,
    softmax_channels,
    sub,
    sum_,
)
from .ops import (
    BatchNormState,
    avg_pool_3x3_same,
    batch_norm,
    bilinear_resize,
    concat_channels,
    conv2d,
    slice_batch,
    slice_channels,
    slice_interleave,
    softmax_cross_entropy,
)

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericsError",
    "no_grad",
    "grad_enabled",
    "make_op",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "abs_",
    "log",
    "clip",
    "elementwise",
    "sum_",
    "mean_",
    "channel_max",
    "softmax_channels",
    "BatchNormState",
    "conv2d",
    "batch_norm",
    "bilinear_resize",
    "avg_pool_3x3_same",
    "concat_channels",
    "slice_interleave",
    "slice_batch",
    "slice_channels",
    "softmax_cross_entropy",
]
