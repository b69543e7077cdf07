"""Global stage: channel reduction, short-cut convolution, clip-level
attention across the whole video, and a feed-forward tail.

Channel width drops to out_channels (C/32 in the default stack). The
attention has no positional encoding and no 1/sqrt(D) scale by default
(``scale_attention`` turns scaling on). Residual additions wrap the
short-cut convolution, the attention and the FFN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError
from .layers import ffn, temporal_conv, uniform_init, zeros_init
from .tensor import Tensor, add, clip_gram, clip_mix, mul, softmax


@dataclass
class GlanceParams:
    reduce_kernel: Tensor  # [D, Cin, 1]
    reduce_bias: Tensor
    scc_kernel: Tensor  # [D, D, 3]
    scc_bias: Tensor
    q_kernel: Tensor  # [D, D, 1]
    q_bias: Tensor
    k_kernel: Tensor
    k_bias: Tensor
    v_kernel: Tensor
    v_bias: Tensor
    ffn_w1: Tensor  # [D, 4D]
    ffn_b1: Tensor
    ffn_w2: Tensor  # [4D, D]
    ffn_b2: Tensor
    scale_attention: bool = False

    @property
    def width(self) -> int:
        return self.reduce_kernel.shape[0]

    def named(self, prefix: str):
        for field in ("reduce_kernel", "reduce_bias", "scc_kernel", "scc_bias",
                      "q_kernel", "q_bias", "k_kernel", "k_bias", "v_kernel", "v_bias",
                      "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
            yield f"{prefix}.{field}", getattr(self, field)


def init_glance(rng, in_channels: int, out_channels: int,
                scale_attention: bool = False) -> GlanceParams:
    d = out_channels
    if d < 1:
        raise ConfigError(f"glance width must be >= 1, got {d}")
    hidden = 4 * d
    return GlanceParams(
        reduce_kernel=uniform_init(rng, (d, in_channels, 1), in_channels),
        reduce_bias=zeros_init(d),
        scc_kernel=uniform_init(rng, (d, d, 3), 3 * d),
        scc_bias=zeros_init(d),
        q_kernel=uniform_init(rng, (d, d, 1), d),
        q_bias=zeros_init(d),
        k_kernel=uniform_init(rng, (d, d, 1), d),
        k_bias=zeros_init(d),
        v_kernel=uniform_init(rng, (d, d, 1), d),
        v_bias=zeros_init(d),
        ffn_w1=uniform_init(rng, (d, hidden), d),
        ffn_b1=zeros_init(hidden),
        ffn_w2=uniform_init(rng, (hidden, d), hidden),
        ffn_b2=zeros_init(d),
        scale_attention=scale_attention,
    )


def attention_logits(x: Tensor, params: GlanceParams) -> Tensor:
    """Query/key projections and pairwise clip dot products, per crop.

    ``x`` is [B, T, P, D]; the result [B, T, T, P] correlates every clip
    pair independently for each crop.
    """
    q = temporal_conv(x, params.q_kernel, params.q_bias, 0)
    k = temporal_conv(x, params.k_kernel, params.k_bias, 0)
    logits = clip_gram(q, k)
    if params.scale_attention:
        logits = mul(logits, Tensor(1.0 / math.sqrt(params.width)))
    return logits


def attention_weights(logits: Tensor) -> Tensor:
    """Softmax over the key-clip axis; each row is a probability vector."""
    return softmax(logits, axis=2)


def vct(x: Tensor, params: GlanceParams) -> Tensor:
    """Clip-level attention: every clip becomes an attention-weighted
    average of the value projections of all clips."""
    weights = attention_weights(attention_logits(x, params))
    values = temporal_conv(x, params.v_kernel, params.v_bias, 0)
    return clip_mix(weights, values)


def glance_forward(x: Tensor, params: GlanceParams) -> Tensor:
    """reduce -> +scc -> +attention -> +ffn, on a [B, T, P, Cin] input."""
    y = temporal_conv(x, params.reduce_kernel, params.reduce_bias, 0)
    y = add(y, temporal_conv(y, params.scc_kernel, params.scc_bias, 1))
    y = add(y, vct(y, params))
    y = add(y, ffn(y, params.ffn_w1, params.ffn_b1, params.ffn_w2, params.ffn_b2))
    return y
