"""Feature amplification: re-inject per-clip feature norms as a residual.

The per-crop channel norm of every clip is computed, run through a single
1D convolution along the clip axis (1 input channel lifted to C output
channels, so neighboring clips' movement levels shape the residual), scaled
by alpha and added back onto the features. Output shape equals input shape.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .layers import temporal_conv, uniform_init, zeros_init
from .tensor import Tensor, add, l2_norm_over_channels, mul


@dataclass
class FamParams:
    kernel: Tensor  # [C, 1, K]
    bias: Tensor  # [C]
    alpha: float

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.kernel.shape[2] % 2 == 0:
            raise ConfigError(f"amplification kernel width must be odd, got {self.kernel.shape[2]}")

    def named(self, prefix: str):
        yield f"{prefix}.kernel", self.kernel
        yield f"{prefix}.bias", self.bias


def init_fam(rng, channels: int, alpha: float, kernel_size: int = 3) -> FamParams:
    return FamParams(kernel=uniform_init(rng, (channels, 1, kernel_size), kernel_size),
                     bias=zeros_init(channels), alpha=alpha)


def magnitude(features: Tensor) -> Tensor:
    """Channel L2 norm per (video, clip, crop): [B,T,P,C] -> [B,T,P,1]."""
    return l2_norm_over_channels(features)


def amplify(features: Tensor, params: FamParams) -> Tensor:
    """features + alpha * Conv1D(magnitude), convolved along the clip axis."""
    norms = magnitude(features)  # [B, T, P, 1]
    pad = params.kernel.shape[2] // 2
    modulated = temporal_conv(norms, params.kernel, params.bias, pad)  # [B, T, P, C]
    return add(features, mul(modulated, Tensor(params.alpha)))
