from mimdm.nn.optim import ParamStore, adam_step
from mimdm.nn.tensor import (
    NumericError,
    ShapeError,
    Tensor,
    add,
    cross_entropy_masked,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mul,
    no_grad,
    reshape,
    scale,
    softmax_rows,
    softplus,
    sub,
    total,
    transpose,
)

__all__ = [
    "NumericError",
    "ParamStore",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "cross_entropy_masked",
    "embedding",
    "gelu",
    "layer_norm",
    "matmul",
    "mul",
    "no_grad",
    "reshape",
    "scale",
    "softmax_rows",
    "softplus",
    "sub",
    "total",
    "transpose",
]
