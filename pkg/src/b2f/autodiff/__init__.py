from .ops import (
    add,
    add_const,
    affine_grid,
    bilinear_resize,
    concat_channels,
    conv2d,
    conv_transpose2d,
    correlation,
    endpoint_error,
    global_avg_pool,
    grid_sample,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sub,
    sum,
)
from .optim import AdamState, adam_step
from .tensor import DTYPE, ContractError, ShapeError, Tape, Tensor, backward, current_tape

__all__ = [
    "AdamState", "ContractError", "DTYPE", "ShapeError", "Tape", "Tensor",
    "adam_step", "add", "add_const", "affine_grid", "backward", "bilinear_resize",
    "concat_channels", "conv2d", "conv_transpose2d", "correlation", "current_tape",
    "endpoint_error", "global_avg_pool", "grid_sample", "mean", "mul", "relu",
    "reshape", "scale", "sub", "sum",
]
