"""Shared building blocks: clip-axis convolution wrapper, dense layers, init."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, add, conv1d, gelu, matmul, transpose


def uniform_init(rng, shape, fan_in: int) -> Tensor:
    """Weight init: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)). Zeros without rng."""
    if rng is None:
        return Tensor(np.zeros(shape), requires_grad=True)
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def zeros_init(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def temporal_conv(x: Tensor, kernel: Tensor, bias: Tensor, padding: int) -> Tensor:
    """conv1d along the clip axis of a [B, T, P, C] tensor, per crop."""
    xt = transpose(x, (0, 2, 1, 3))  # [B, P, T, C]
    yt = conv1d(xt, kernel, bias, padding)
    return transpose(yt, (0, 2, 1, 3))


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two fully-connected layers with a GeLU between."""
    return dense(gelu(dense(x, w1, b1)), w2, b2)
