"""Tensor arithmetic with exact reverse-mode differentiation and a
finite-difference oracle, plus the checkpoint wire format."""

from .engine import (
    Tensor, leaf, constant, backward, grad, finite_diff,
    add, sub, mul, div, neg, pow_const, exp, log, sqrt, sin, cos, tanh,
    sigmoid, relu, clip, matmul, conv2d, avgpool2d, upsample2d, softmax, log_softmax,
    tsum, tmean, take, reshape, transpose, concat, sign, floor, custom_node,
    registered_ops,
)
from .serialize import (
    tensor_to_bytes, tensor_from_bytes, write_tensor, read_tensor,
    write_named_tensors, read_named_tensors,
)
