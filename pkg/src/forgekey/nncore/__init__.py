from .functional import gelu, layer_norm, linear, multi_head_attention, softmax, softmax_cross_entropy
from .optim import OptimState, ParamStore, RowOptimState, adamw_rows, adamw_step, cosine_lr
from .tensor import (
    Tensor,
    add,
    backward,
    concat,
    mean,
    mul,
    matmul,
    no_grad,
    reshape,
    select,
    square,
    stop_gradient,
    tsum,
)

__all__ = [
    "Tensor", "add", "backward", "concat", "mean", "mul", "matmul", "no_grad", "reshape",
    "select", "square", "stop_gradient", "tsum",
    "gelu", "layer_norm", "linear", "multi_head_attention", "softmax", "softmax_cross_entropy",
    "OptimState", "ParamStore", "RowOptimState", "adamw_rows", "adamw_step", "cosine_lr",
]
