from .tensor import (
    EPS,
    Graph,
    Tensor,
    absolute,
    add,
    as_tensor,
    concat,
    div,
    elementwise,
    exp,
    l2_normalize,
    leaky_relu,
    log,
    mul,
    narrow,
    no_grad,
    permute,
    pow_scalar,
    reduce,
    reduce_max,
    reduce_mean,
    reduce_sum,
    reshape,
    scalar,
    sigmoid,
    sub,
    track_param_reads,
    zero_grads,
)
from .spatial import bilinear_sample, conv2d, cost_volume

__all__ = [
    "EPS",
    "Graph",
    "Tensor",
    "absolute",
    "add",
    "as_tensor",
    "bilinear_sample",
    "concat",
    "conv2d",
    "cost_volume",
    "div",
    "elementwise",
    "exp",
    "l2_normalize",
    "leaky_relu",
    "log",
    "mul",
    "narrow",
    "no_grad",
    "permute",
    "pow_scalar",
    "reduce",
    "reduce_max",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "scalar",
    "sigmoid",
    "sub",
    "track_param_reads",
    "zero_grads",
]
