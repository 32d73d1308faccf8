"""Differentiable core: tape-based autodiff over float64 numpy arrays."""

from .adam import AdamState, adam_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .kernels import available_backends, backend_name
from .nnops import batch_norm, conv2d, conv2d_transpose, softmax_pairs
from .tensor import (
    NumericalError,
    Tensor,
    as_tensor,
    concat,
    eval_with_gradients,
    gather_hw,
    no_grad,
    set_debug_checks,
)

__all__ = [
    "AdamState",
    "CheckpointError",
    "NumericalError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "available_backends",
    "backend_name",
    "batch_norm",
    "concat",
    "conv2d",
    "conv2d_transpose",
    "eval_with_gradients",
    "gather_hw",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "set_debug_checks",
    "softmax_pairs",
]
