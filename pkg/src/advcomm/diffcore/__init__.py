"""Minimal reverse-mode differentiation core.

Tensors are thin wrappers over numpy arrays (float32 by default). Primitive
operations append nodes to the active ComputationRecord; `backward` replays
the record in reverse and returns gradients shaped like a ParamTree.
"""

from .tensor import (
    ComputationRecord,
    ShapeError,
    Tensor,
    active_dtype,
    add,
    assert_all_finite,
    avgpool2x,
    backward,
    bce_with_mask,
    clip,
    concat,
    conv2d,
    dense,
    exp,
    gather_last,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    minimum,
    mse,
    mul,
    precision,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    stop_gradient,
    sub,
    take,
    upsample2x,
)
from .params import ParamTree, StructureMismatch, load_param_tree, save_param_tree
from .optim import Adam, OptimConfig, Sgd, clip_by_global_norm, make_optimizer
from .gradcheck import GradCheckReport, grad_check

__all__ = [
    "Adam",
    "ComputationRecord",
    "GradCheckReport",
    "OptimConfig",
    "ParamTree",
    "Sgd",
    "ShapeError",
    "StructureMismatch",
    "Tensor",
    "active_dtype",
    "add",
    "assert_all_finite",
    "avgpool2x",
    "backward",
    "bce_with_mask",
    "clip",
    "clip_by_global_norm",
    "concat",
    "conv2d",
    "dense",
    "exp",
    "gather_last",
    "grad_check",
    "leaky_relu",
    "load_param_tree",
    "log",
    "log_softmax",
    "make_optimizer",
    "matmul",
    "minimum",
    "mse",
    "mul",
    "precision",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "save_param_tree",
    "scale",
    "sigmoid",
    "softmax",
    "stop_gradient",
    "sub",
    "take",
    "upsample2x",
]
