"""Minimal float64 tensor library with reverse-mode autodiff."""

from .gradcheck import finite_diff_check
from .nn import (causal_conv1d, dropout, gather_last, layernorm, log_softmax, soft_cross_entropy,
                 softmax)
from .scan import BACKEND as SCAN_BACKEND
from .scan import selective_scan_states, state_readout, system_readout
from .tensor import (ContractError, DimensionError, Tensor, add, as_tensor, backward,
                     broadcast_to, concat, div, elementwise, exp, gelu, getitem, is_grad_enabled,
                     log, matmul, mean, mul, neg, no_grad, relu, reshape, sigmoid, silu, softplus,
                     stack, sub, take_rows, tanh, transpose, tsum)

__all__ = [
    "ContractError", "DimensionError", "SCAN_BACKEND", "Tensor", "add", "as_tensor", "backward",
    "broadcast_to", "causal_conv1d", "concat", "div", "dropout", "elementwise", "exp",
    "finite_diff_check", "gather_last", "gelu", "getitem", "is_grad_enabled", "layernorm", "log",
    "log_softmax", "matmul", "mean", "mul", "neg", "no_grad", "relu", "reshape",
    "selective_scan_states", "sigmoid", "silu", "soft_cross_entropy", "softmax", "softplus",
    "stack", "state_readout", "sub", "system_readout", "take_rows", "tanh", "transpose", "tsum",
]
