"""Local stage: channel expansion, short-cut convolution, and a
self-attentional convolution where the feature map acts as its own kernel
over a sliding channel window, followed by a feed-forward tail.

The self product has no learnable weights: each channel is multiplied by
the sum of its channel neighborhood, so output k1 = sum over the window of
x[k1] * x[k2]. ``full_window`` widens the window to cover every channel;
``normalize`` divides by the window width.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .layers import ffn, temporal_conv, uniform_init, zeros_init
from .tensor import Tensor, add, channel_boxsum, mul


@dataclass
class FocusParams:
    expand_kernel: Tensor  # [D, Cin, 1]
    expand_bias: Tensor
    scc_kernel: Tensor  # [D, D, 3]
    scc_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    window: int = 5
    full_window: bool = False
    normalize: bool = False

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"self-product window must be odd, got {self.window}")

    @property
    def width(self) -> int:
        return self.expand_kernel.shape[0]

    def named(self, prefix: str):
        for field in ("expand_kernel", "expand_bias", "scc_kernel", "scc_bias",
                      "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
            yield f"{prefix}.{field}", getattr(self, field)


def init_focus(rng, in_channels: int, out_channels: int, window: int = 5,
               full_window: bool = False, normalize: bool = False) -> FocusParams:
    d = out_channels
    if d < 1:
        raise ConfigError(f"focus width must be >= 1, got {d}")
    hidden = 4 * d
    return FocusParams(
        expand_kernel=uniform_init(rng, (d, in_channels, 1), in_channels),
        expand_bias=zeros_init(d),
        scc_kernel=uniform_init(rng, (d, d, 3), 3 * d),
        scc_bias=zeros_init(d),
        ffn_w1=uniform_init(rng, (d, hidden), d),
        ffn_b1=zeros_init(hidden),
        ffn_w2=uniform_init(rng, (hidden, d), hidden),
        ffn_b2=zeros_init(d),
        window=window, full_window=full_window, normalize=normalize,
    )


def sac(x: Tensor, window: int = 5, full_window: bool = False,
        normalize: bool = False) -> Tensor:
    """Channel-window self product at every (video, clip, crop) position."""
    w = 2 * x.shape[-1] - 1 if full_window else window
    out = mul(x, channel_boxsum(x, w))
    if normalize:
        out = mul(out, Tensor(1.0 / w))
    return out


def focus_forward(x: Tensor, params: FocusParams) -> Tensor:
    """expand -> +scc -> +self-product -> +ffn, on a [B, T, P, Cin] input."""
    y = temporal_conv(x, params.expand_kernel, params.expand_bias, 0)
    y = add(y, temporal_conv(y, params.scc_kernel, params.scc_bias, 1))
    y = add(y, sac(y, params.window, params.full_window, params.normalize))
    y = add(y, ffn(y, params.ffn_w1, params.ffn_b1, params.ffn_w2, params.ffn_b2))
    return y
