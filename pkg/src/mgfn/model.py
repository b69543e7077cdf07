"""Full scoring head: amplification, a configurable glance/focus stack and a
per-clip classifier producing sigmoid anomaly scores and clip feature norms.

Block orderings (channel widths in parentheses, C input channels):

* ``gf``        glance (C -> C/32) then focus (C/32 -> C/16)
* ``ff``        focus (C -> C/16) then focus (C/16 -> C/16)
* ``fg``        focus (C -> C/16) then glance (C/16 -> C/32)
* ``gf_fusion`` glance (C -> C/32) and focus (C -> C/16) in parallel on the
  amplified features; the glance branch is linearly lifted to C/16 and the
  branches are summed

Scores and magnitudes average over the P crops; the sigmoid is applied
after crop averaging. Dropout lives only in the score head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import fam, focus, glance
from .errors import CheckpointError, ConfigError, DataError
from .featureio import Checkpoint, ScoreSeries, VideoRecord, expand_scores_to_frames, segment_to_clips
from .layers import dense, uniform_init, zeros_init
from .tensor import (Tensor, dropout, gelu, l2_norm_over_channels, mean, reshape,
                     sigmoid, stack)

BLOCK_ORDERS = ("gf", "ff", "fg", "gf_fusion")
LOSS_VARIANTS = ("mc", "rtfm", "sce")


@dataclass
class Architecture:
    """Everything needed to rebuild the model and its training objective."""

    block_order: str = "gf"
    channels: int = 2048  # C
    clips: int = 32  # T
    crops: int = 10  # P
    topk: int = 3  # k
    alpha: float = 0.1
    fam_kernel: int = 3
    sac_window: int = 5
    sac_full_window: bool = False
    sac_normalize: bool = False
    scale_attention: bool = False
    head_dropout: float = 0.7

    def __post_init__(self):
        if self.block_order not in BLOCK_ORDERS:
            raise ConfigError(f"block_order must be one of {BLOCK_ORDERS}, "
                              f"got '{self.block_order}'")
        if self.channels % 32 != 0:
            raise ConfigError(f"channel count must be divisible by 32, got {self.channels}")
        if not 1 <= self.topk <= self.clips:
            raise ConfigError(f"topk {self.topk} out of range for {self.clips} clips")
        if self.clips < 1 or self.crops < 1:
            raise ConfigError("clips and crops must be >= 1")

    @property
    def feature_width(self) -> int:
        return self.channels // 32 if self.block_order == "fg" else self.channels // 16

    @property
    def head_widths(self):
        # D -> D/4 -> D/32 -> 1, with floors so the hidden layers stay wide
        # enough to survive dropout at small desk-scale channel counts.
        d = self.feature_width
        return (d, max(d // 4, 8), max(d // 32, 4), 1)

    def block_widths(self):
        """(kind, in_channels, out_channels) per block, in forward order."""
        c = self.channels
        if self.block_order == "gf":
            return [("glance", c, c // 32), ("focus", c // 32, c // 16)]
        if self.block_order == "ff":
            return [("focus", c, c // 16), ("focus", c // 16, c // 16)]
        if self.block_order == "fg":
            return [("focus", c, c // 16), ("glance", c // 16, c // 32)]
        return [("glance", c, c // 32), ("focus", c, c // 16)]  # gf_fusion, parallel

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "Architecture":
        return cls(**doc)


@dataclass
class ModelParams:
    """Structured parameters plus a stable name -> tensor view for IO."""

    fam: fam.FamParams
    blocks: list  # [(kind, params), ...]
    head: list  # [(w, b), ...]
    fuse: tuple | None = None  # (w, b) lifting the glance branch for gf_fusion

    def named(self):
        yield from self.fam.named("fam")
        for i, (kind, params) in enumerate(self.blocks):
            yield from params.named(f"block{i}.{kind}")
        if self.fuse is not None:
            yield "fuse.w", self.fuse[0]
            yield "fuse.b", self.fuse[1]
        for i, (w, b) in enumerate(self.head):
            yield f"head.fc{i}.w", w
            yield f"head.fc{i}.b", b

    def tensors(self):
        return [t for _, t in self.named()]

    def names(self):
        return [n for n, _ in self.named()]

    def zero_grads(self):
        for t in self.tensors():
            t.zero_grad()


@dataclass
class ModelOutput:
    clip_scores: Tensor  # [B, T], in (0, 1)
    clip_magnitudes: Tensor  # [B, T], crop-averaged channel norms
    features: Tensor  # [B, T, P, D]


def init_params(arch: Architecture, rng=None) -> ModelParams:
    """Fresh parameters; zero-filled when ``rng`` is None (checkpoint restore)."""
    fam_params = fam.init_fam(rng, arch.channels, arch.alpha, arch.fam_kernel)
    blocks = []
    for kind, cin, cout in arch.block_widths():
        if kind == "glance":
            blocks.append((kind, glance.init_glance(rng, cin, cout,
                                                    arch.scale_attention)))
        else:
            blocks.append((kind, focus.init_focus(rng, cin, cout, arch.sac_window,
                                                  arch.sac_full_window,
                                                  arch.sac_normalize)))
    fuse = None
    if arch.block_order == "gf_fusion":
        fuse = (uniform_init(rng, (arch.channels // 32, arch.channels // 16),
                             arch.channels // 32),
                zeros_init(arch.channels // 16))
    widths = arch.head_widths
    head = [(uniform_init(rng, (widths[i], widths[i + 1]), widths[i]),
             zeros_init(widths[i + 1])) for i in range(len(widths) - 1)]
    return ModelParams(fam=fam_params, blocks=blocks, head=head, fuse=fuse)


def _run_blocks(x: Tensor, params: ModelParams, arch: Architecture) -> Tensor:
    if arch.block_order == "gf_fusion":
        (_, g_params), (_, f_params) = params.blocks
        g_out = glance.glance_forward(x, g_params)
        f_out = focus.focus_forward(x, f_params)
        return f_out + dense(g_out, params.fuse[0], params.fuse[1])
    for kind, block_params in params.blocks:
        run = glance.glance_forward if kind == "glance" else focus.focus_forward
        x = run(x, block_params)
    return x


def forward(features: Tensor, params: ModelParams, arch: Architecture,
            training: bool = False, dropout_rng=None) -> ModelOutput:
    """Score a [B, T, P, C] feature batch."""
    if features.data.ndim != 4:
        raise ConfigError(f"expected a [B,T,P,C] batch, got shape {features.shape}")
    b, t, p, c = features.shape
    if c != arch.channels or t != arch.clips:
        raise ConfigError(f"batch dims T={t}, C={c} do not match the architecture "
                          f"(T={arch.clips}, C={arch.channels})")
    if training and arch.head_dropout > 0 and dropout_rng is None:
        raise ConfigError("training forward needs a dropout rng")

    x = fam.amplify(features, params.fam)
    x = _run_blocks(x, params, arch)  # [B, T, P, D]

    norms = reshape(l2_norm_over_channels(x), (b, t, p))
    magnitudes = mean(norms, axis=2)  # [B, T]

    h = mean(x, axis=2)  # [B, T, D], crop-averaged
    for i, (w, bias) in enumerate(params.head):
        h = dense(h, w, bias)
        if i < len(params.head) - 1:
            h = gelu(h)
            if training and arch.head_dropout > 0:
                h = dropout(h, arch.head_dropout, dropout_rng)
    scores = sigmoid(reshape(h, (b, t)))
    return ModelOutput(clip_scores=scores, clip_magnitudes=magnitudes, features=x)


# ---------------------------------------------------------------------------
# Checkpoint restore and single-video inference


def params_to_checkpoint(params: ModelParams, arch: Architecture, **kwargs) -> Checkpoint:
    named = {name: t.data.copy() for name, t in params.named()}
    return Checkpoint(arch=arch.to_dict(), params=named, **kwargs)


def restore_model(ckpt: Checkpoint):
    """Rebuild (arch, params) from a checkpoint; names must match exactly."""
    try:
        arch = Architecture.from_dict(ckpt.arch)
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint architecture invalid: {exc}") from exc
    params = init_params(arch, rng=None)
    expected = dict(params.named())
    unknown = set(ckpt.params) - set(expected)
    missing = set(expected) - set(ckpt.params)
    if unknown or missing:
        raise CheckpointError(f"parameter names do not match the architecture "
                              f"(unknown: {sorted(unknown)}, missing: {sorted(missing)})")
    for name, tensor in expected.items():
        blob = ckpt.params[name]
        if blob.size != tensor.data.size:
            raise CheckpointError(f"parameter '{name}' has {blob.size} values, "
                                  f"expected {tensor.data.size}")
        tensor.data[...] = blob.reshape(tensor.data.shape)
    return arch, params


def infer_video(record: VideoRecord, ckpt: Checkpoint) -> ScoreSeries:
    """Frame-level anomaly scores for one video under a trained checkpoint."""
    arch, params = restore_model(ckpt)
    if record.snippets.shape[2] != arch.channels:
        raise DataError(f"video {record.id}: feature width {record.snippets.shape[2]} "
                        f"does not match checkpoint channels {arch.channels}")
    clips = segment_to_clips(record, arch.clips)
    batch = stack([clips])  # [1, T, P, C]
    out = forward(batch, params, arch, training=False)
    series = expand_scores_to_frames(Tensor(out.clip_scores.data[0]), record.frame_count)
    series.video_id = record.id
    return series
