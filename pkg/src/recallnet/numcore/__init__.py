"""Dense float64 tensors with reverse-mode differentiation."""
from .gradcheck import GradCheckReport, grad_check, numeric_gradient
from .ops import (
    add, affine, attention_pool, clamp, concat, conv1d, cosine, euclidean_norm,
    log, log_sigmoid, log_softmax, lookup, mean, mul, neg, normalize, relu, reshape, scale, sigmoid,
    softmax, softmax_attention, sub, sum,
)
from .optim import SGD, Adam, make_optimizer
from .serialize import decode_tensors, encode_tensors
from .tensor import OP_KINDS, Tensor, as_tensor, backward, parameter, topological_order

__all__ = [
    "Tensor", "as_tensor", "parameter", "backward", "topological_order", "OP_KINDS",
    "add", "sub", "mul", "neg", "scale", "affine", "conv1d", "relu", "sigmoid",
    "log_sigmoid", "log_softmax", "softmax", "attention_pool", "softmax_attention", "concat",
    "sum", "mean", "log", "clamp", "cosine", "euclidean_norm", "normalize", "lookup", "reshape",
    "grad_check", "numeric_gradient", "GradCheckReport",
    "Adam", "SGD", "make_optimizer", "encode_tensors", "decode_tensors",
]
