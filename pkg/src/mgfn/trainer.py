"""Training loop: class-balanced batches, Adam with decoupled weight decay,
periodic evaluation, checkpointing and run logging.

All randomness derives from counter-based Philox streams keyed by
(seed, purpose, step): purpose 0 seeds parameter init, 1 batch sampling,
2 head dropout. A resumed run therefore replays the exact step sequence of
an uninterrupted one; parameters differ only by the one-time float32
quantization applied when the checkpoint was written.

Run directory layout: ``config.json`` (config snapshot incl. protocol
notes), ``steps.jsonl`` (one loss-breakdown record per step),
``evals.jsonl``, ``best.ckpt`` / ``final.ckpt``, ``scores/*.csv`` frame
score dumps for the eval split, and ``summary.json``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericsError
from .featureio import (Checkpoint, DatasetManifest, expand_scores_to_frames,
                        load_manifest, load_records, save_checkpoint, segment_to_clips)
from .losses import LOSS_VARIANTS, total_loss
from .metrics import EvalResult, evaluate_frames
from .model import Architecture, forward, init_params, params_to_checkpoint, restore_model
from .tensor import Tape, Tensor

RNG_SPEC = "numpy Philox4x64-10, streams keyed by (seed, purpose<<32 | step)"

PROTOCOL_NOTES = {
    "frame_scores": "clip scores expanded piecewise-constant over the frame partition",
    "crop_scoring": "scores and magnitudes are crop averages; sigmoid applied after averaging",
    "pair_distances": "hardest-pair absolute magnitude differences "
                      "(signed selection only with signed_pair_distances)",
    "weight_decay": "decoupled: parameters shrink by lr*wd before the Adam update",
    "rng": RNG_SPEC,
}


@dataclass
class TrainConfig:
    batch_size: int = 16
    num_clips: int = 32  # clips per video (T)
    num_crops: int | None = None  # crops per snippet (P); None adopts the manifest (protocol default 10)
    topk: int = 3
    alpha: float = 0.1
    lambda_ts: float = 1.0
    lambda_sp: float = 1.0
    lambda_mc: float = 0.001
    lr: float = 0.001
    weight_decay: float = 0.0005
    margin: float = 100.0
    steps: int = 500
    eval_every: int = 25
    seed: int = 0
    loss_variant: str = "mc"  # mc | rtfm | sce
    block_order: str = "gf"  # gf | ff | fg | gf-fusion
    signed_pair_distances: bool = False

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.topk > self.num_clips:
            raise ConfigError(f"topk {self.topk} exceeds clip count {self.num_clips}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.block_order.replace("-", "_") not in ("gf", "ff", "fg", "gf_fusion"):
            raise ConfigError(f"unknown block order '{self.block_order}'")
        if self.steps < 0 or self.eval_every < 1:
            raise ConfigError("steps must be >= 0 and eval_every >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


def rng_stream(seed: int, purpose: int, step: int = 0) -> np.random.Generator:
    key = np.array([seed, (purpose << 32) | step], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(named_params, state: AdamState, lr: float, weight_decay: float):
    """One update; gradients are read from each tensor's grad slot."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)


# ---------------------------------------------------------------------------
# Batch sampling


def sample_batch(records, batch_size: int, rng: np.random.Generator):
    """batch_size/2 normal then batch_size/2 abnormal videos, sampled
    uniformly per class without replacement within the batch."""
    half = batch_size // 2
    normal = [r for r in records if r.label == 0]
    abnormal = [r for r in records if r.label == 1]
    if len(normal) < half or len(abnormal) < half:
        raise DataError(f"need {half} videos per class, have {len(normal)} normal "
                        f"and {len(abnormal)} abnormal")
    picked_n = rng.choice(len(normal), size=half, replace=False)
    picked_a = rng.choice(len(abnormal), size=half, replace=False)
    return [normal[i] for i in picked_n] + [abnormal[i] for i in picked_a]


# ---------------------------------------------------------------------------
# Evaluation


def evaluate_model(arch: Architecture, params, records, chunk: int = 32):
    """Pooled frame-level metrics over ``records``; also returns the
    per-video frame score series."""
    if not records:
        raise DataError("evaluation needs at least one video")
    series_all = []
    for lo in range(0, len(records), chunk):
        part = records[lo:lo + chunk]
        batch = Tensor(np.stack([segment_to_clips(r, arch.clips).data for r in part]))
        out = forward(batch, params, arch, training=False)
        for i, record in enumerate(part):
            series = expand_scores_to_frames(Tensor(out.clip_scores.data[i]),
                                             record.frame_count)
            series.video_id = record.id
            series_all.append(series)
    scores, labels = [], []
    for record, series in zip(records, series_all):
        mask = record.frame_mask
        if mask is None:
            if record.label == 1:
                raise DataError(f"abnormal video {record.id} has no frame mask; "
                                f"frame-level evaluation undefined")
            mask = np.zeros(record.frame_count, dtype=np.uint8)
        scores.append(series.frame_scores)
        labels.append(mask)
    result = evaluate_frames(np.concatenate(scores), np.concatenate(labels))
    return result, series_all


# ---------------------------------------------------------------------------
# Training


def _as_manifest(source) -> DatasetManifest:
    if isinstance(source, DatasetManifest):
        return source
    return load_manifest(source)


def build_architecture(config: TrainConfig, manifest: DatasetManifest) -> Architecture:
    if config.num_crops is not None and config.num_crops != manifest.crops:
        raise DataError(f"config expects {config.num_crops} crops, manifest "
                        f"has {manifest.crops}")
    return Architecture(block_order=config.block_order.replace("-", "_"),
                        channels=manifest.channels, clips=config.num_clips,
                        crops=manifest.crops, topk=config.topk, alpha=config.alpha)


def _checkpoint(params, arch, config, adam: AdamState, step: int) -> Checkpoint:
    opt = {}
    for name, _ in params.named():
        if name in adam.m:
            opt[f"adam.m.{name}"] = adam.m[name].reshape(-1).copy()
            opt[f"adam.v.{name}"] = adam.v[name].reshape(-1).copy()
    return params_to_checkpoint(
        params, arch, opt_state=opt, seed=config.seed, step=step,
        extra={"config": asdict(config), "protocol": PROTOCOL_NOTES,
               "block_widths": arch.block_widths()})


def _restore_adam(params, ckpt: Checkpoint) -> AdamState:
    state = AdamState(t=ckpt.step)
    for name, tensor in params.named():
        m = ckpt.opt_state.get(f"adam.m.{name}")
        v = ckpt.opt_state.get(f"adam.v.{name}")
        if m is not None:
            state.m[name] = m.reshape(tensor.data.shape).copy()
        if v is not None:
            state.v[name] = v.reshape(tensor.data.shape).copy()
    return state


def write_score_dumps(out_dir, series_list):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for series in series_list:
        lines = ["frame_index,score"]
        lines += [f"{i},{s:.6f}" for i, s in enumerate(series.frame_scores)]
        (out_dir / f"{series.video_id}.csv").write_text("\n".join(lines) + "\n")


def train(config: TrainConfig, train_manifest, out_dir, eval_manifest=None,
          resume: Checkpoint | None = None):
    """Run the optimization loop; returns (final Checkpoint, summary dict)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _as_manifest(train_manifest)
    records = load_records(manifest)
    arch = build_architecture(config, manifest)

    if resume is not None:
        resume_arch, params = restore_model(resume)
        if resume_arch.to_dict() != arch.to_dict():
            raise ConfigError("resume checkpoint architecture does not match the run config")
        adam = _restore_adam(params, resume)
        start = resume.step
    else:
        params = init_params(arch, rng_stream(config.seed, 0))
        adam = AdamState()
        start = 0
    if start > config.steps:
        raise ConfigError(f"checkpoint is at step {start}, beyond steps={config.steps}")

    eval_records = None
    if eval_manifest is not None:
        eval_records = load_records(_as_manifest(eval_manifest))

    clip_cache = {r.id: segment_to_clips(r, arch.clips).data for r in records}
    snapshot = {"config": asdict(config), "arch": arch.to_dict(),
                "block_widths": arch.block_widths(), "protocol": PROTOCOL_NOTES}
    (out_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")

    best = {"auc": -1.0, "step": 0}
    evals = []
    step = start
    with open(out_dir / "steps.jsonl", "w") as step_log, \
            open(out_dir / "evals.jsonl", "w") as eval_log:
        for step in range(start + 1, config.steps + 1):
            batch = sample_batch(records, config.batch_size,
                                 rng_stream(config.seed, 1, step))
            features = Tensor(np.stack([clip_cache[r.id] for r in batch]))
            labels = [r.label for r in batch]
            with Tape() as tape:
                out = forward(features, params, arch, training=True,
                              dropout_rng=rng_stream(config.seed, 2, step))
                loss, breakdown = total_loss(
                    out, labels, k=config.topk, lambda_ts=config.lambda_ts,
                    lambda_sp=config.lambda_sp, lambda_mc=config.lambda_mc,
                    margin=config.margin, variant=config.loss_variant,
                    signed_pair_distances=config.signed_pair_distances)
            if not math.isfinite(breakdown.total):
                raise NumericsError(f"non-finite loss at step {step}: "
                                    f"{json.dumps(breakdown.to_dict())}")
            tape.backward(loss)
            adam_step(params.named(), adam, config.lr, config.weight_decay)
            params.zero_grads()
            step_log.write(json.dumps({"step": step, **breakdown.to_dict()},
                                      sort_keys=True) + "\n")

            due = step % config.eval_every == 0 or step == config.steps
            if due and eval_records is not None:
                result, _ = evaluate_model(arch, params, eval_records)
                evals.append({"step": step, **result.to_dict()})
                eval_log.write(json.dumps(evals[-1], sort_keys=True) + "\n")
                if result.auc > best["auc"]:
                    best = {"auc": result.auc, "step": step}
                    save_checkpoint(out_dir / "best.ckpt",
                                    _checkpoint(params, arch, config, adam, step))

    final = _checkpoint(params, arch, config, adam, step)
    save_checkpoint(out_dir / "final.ckpt", final)
    if not (out_dir / "best.ckpt").exists():
        save_checkpoint(out_dir / "best.ckpt", final)

    summary = {"steps": step, "seed": config.seed, "loss_variant": config.loss_variant,
               "block_order": config.block_order, "arch": arch.to_dict(),
               "best_auc": best["auc"] if evals else None,
               "best_step": best["step"] if evals else None,
               "final_auc": evals[-1]["auc"] if evals else None,
               "final_ap": evals[-1]["ap"] if evals else None,
               "evals": evals, "protocol": PROTOCOL_NOTES, "rng": RNG_SPEC}
    if eval_records is not None:
        _, series = evaluate_model(arch, params, eval_records)
        write_score_dumps(out_dir / "scores", series)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return final, summary
