from .gradcheck import grad_check
from .losses import (
    IndexOutOfRange,
    NonPositiveDelta,
    TrajectoryTooShort,
    cross_entropy,
    huber,
    second_diff_l1,
)
from .optim import AdamState, MissingGrad, adam_step
from .tensor import (
    DetachedTensor,
    Graph,
    ShapeMismatch,
    Tensor,
    add,
    as_tensor,
    avg_pool2x2,
    backward,
    bilinear_sample,
    concat,
    index,
    l2_normalize,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    parameter,
    relu,
    reshape,
    scalar_mul,
    softmax,
    straight_through,
    sub,
    transpose,
    zero_grad,
)
from .tensor import sum as sum_  # noqa: F401

__all__ = [
    "AdamState", "DetachedTensor", "Graph", "IndexOutOfRange", "MissingGrad",
    "NonPositiveDelta", "ShapeMismatch", "Tensor", "TrajectoryTooShort",
    "adam_step", "add", "as_tensor", "avg_pool2x2", "backward", "bilinear_sample",
    "concat", "cross_entropy", "grad_check", "huber", "index", "l2_normalize",
    "layer_norm", "linear", "matmul", "mean", "mul", "parameter", "relu",
    "reshape", "scalar_mul", "second_diff_l1", "softmax", "straight_through",
    "sub", "sum_", "transpose", "zero_grad",
]
