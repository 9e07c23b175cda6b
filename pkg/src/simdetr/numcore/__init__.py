"""Float64 tensors, reverse-mode autodiff, AdamW and gradient checking."""
from .gradcheck import GradCheckReport, grad_check, grad_check_many
from .optim import MissingGradError, OptimState, adamw_step, clip_grad_norm
from .params import CKPT_FORMAT, ParamStore
from .rng import stream
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    cosine_sim,
    custom_op,
    div,
    exp,
    gather,
    grad_enabled,
    l2_norm,
    layer_norm,
    log,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_rows,
    softplus,
    sqrt,
    stack,
    sub,
    sum_,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
