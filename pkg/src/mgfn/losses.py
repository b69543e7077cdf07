"""Training objectives.

All losses operate on model outputs for a class-balanced batch (first half
normal, second half abnormal, in any order as given by ``labels``). Clip
selection is MIL-style: the k clips with the largest crop-averaged feature
norms stand in for the missing clip-level labels.

The magnitude-contrastive objective works on per-video top-k magnitude
sets. For every same-category video pair the hardest (largest absolute
difference) magnitude pair is pulled together; for every normal/abnormal
pair the closest magnitude pair is pushed apart by a margin hinge. Pair
distances use absolute differences; ``signed_pair_distances`` switches to
the raw signed min/max selection for comparison runs.

The baseline magnitude objective instead pushes mean abnormal top-k
magnitudes above normal ones globally by the margin, the behavior whose
cross-scene failure mode the contrastive version is designed to avoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from . import tensor as tz
from .tensor import Tensor, gather, stack, topk_indices

LOSS_VARIANTS = ("mc", "rtfm", "sce")

SCORE_CLAMP = 1e-7


@dataclass
class MagnitudeSet:
    """Top-k clip magnitudes of one video, descending, ties by lower index."""

    video_index: int
    label: int
    values: Tensor  # [k], differentiable
    indices: list

    def __post_init__(self):
        if len(self.indices) != self.values.data.size:
            raise DataError("magnitude set indices and values disagree")
        if len(set(self.indices)) != len(self.indices):
            raise DataError("magnitude set indices must be distinct")


@dataclass
class LossBreakdown:
    l_sce: float
    l_mc: float
    l_ts: float
    l_sp: float
    total: float
    variant: str = "mc"
    pair_diagnostics: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"l_sce": self.l_sce, "l_mc": self.l_mc, "l_ts": self.l_ts,
                "l_sp": self.l_sp, "total": self.total, "variant": self.variant}


def topk_magnitude_sets(output, labels, k: int):
    """Per-video top-k clip magnitudes, selected on the current values."""
    mags = output.clip_magnitudes  # [B, T]
    b, t = mags.shape
    if len(labels) != b:
        raise DataError(f"{len(labels)} labels for a batch of {b}")
    sets = []
    for i in range(b):
        idx = topk_indices(mags.data[i], k)
        values = gather(mags, i * t + idx)
        sets.append(MagnitudeSet(video_index=i, label=int(labels[i]),
                                 values=values, indices=[int(j) for j in idx]))
    return sets


def _selected_score_bce(scores: Tensor, mags, labels) -> Tensor:
    """Video-level BCE on the mean score of the top-k-by-magnitude clips."""
    b, t = scores.shape
    flat = np.array([[m.video_index * t + j for j in m.indices] for m in mags])
    video_scores = tz.mean(gather(scores, flat), axis=1)  # [B]
    s = tz.clamp(video_scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    log_lik = Tensor(y) * tz.log(s) + Tensor(1.0 - y) * tz.log(1.0 - s)
    return tz.neg(tz.mean(log_lik))


def sce_loss(output, labels, k: int = 3) -> Tensor:
    """Sigmoid cross-entropy on top-k-by-magnitude video scores."""
    mags = topk_magnitude_sets(output, labels, k)
    return _selected_score_bce(output.clip_scores, mags, labels)


# ---------------------------------------------------------------------------
# Magnitude-contrastive objective


def _split_rows(mags):
    normal = [i for i, m in enumerate(mags) if m.label == 0]
    abnormal = [i for i, m in enumerate(mags) if m.label == 1]
    if not normal or len(normal) != len(abnormal):
        raise DataError(f"class-balanced batch required, got {len(normal)} normal "
                        f"and {len(abnormal)} abnormal videos")
    return normal, abnormal


def _hardest_pair(table, p, q, same: bool, signed: bool):
    diff = table[p][:, None] - table[q][None, :]
    if signed:
        flat = np.argmin(diff) if same else np.argmax(diff)
    else:
        gap = np.abs(diff)
        flat = np.argmax(gap) if same else np.argmin(gap)
    a, b = np.unravel_index(flat, diff.shape)
    return int(a), int(b)


def mc_loss_with_diagnostics(mags, margin: float, signed: bool = False):
    """Returns the loss tensor and the chosen pair indices per term."""
    normal, abnormal = _split_rows(mags)
    stacked = stack([m.values for m in mags])  # [B, k]
    table = stacked.data
    k = table.shape[1]
    diags = []

    def pair_distance(specs):
        # specs: (row_p, row_q, elem_a, elem_b); one differentiable diff each
        u = gather(stacked, np.array([p * k + a for p, _, a, _ in specs]))
        v = gather(stacked, np.array([q * k + b for _, q, _, b in specs]))
        return tz.sub(u, v)

    terms = []
    for kind, group in (("same_normal", normal), ("same_abnormal", abnormal)):
        specs = []
        for x in range(len(group)):
            for y in range(x + 1, len(group)):
                p, q = group[x], group[y]
                a, b = _hardest_pair(table, p, q, same=True, signed=signed)
                specs.append((p, q, a, b))
                diags.append({"kind": kind, "videos": (mags[p].video_index,
                                                       mags[q].video_index),
                              "elements": (a, b),
                              "distance": float(table[p][a] - table[q][b])})
        if not specs:
            continue
        d = pair_distance(specs)
        terms.append(tz.mean(d if signed else tz.abs_(d)))

    specs = []
    for p in normal:
        for u in abnormal:
            a, b = _hardest_pair(table, p, u, same=False, signed=signed)
            specs.append((p, u, a, b))
            diags.append({"kind": "cross", "videos": (mags[p].video_index,
                                                      mags[u].video_index),
                          "elements": (a, b),
                          "distance": float(table[p][a] - table[u][b])})
    d = pair_distance(specs)
    sep = d if signed else tz.abs_(d)
    hinge = tz.relu(margin - sep)
    terms.append(tz.mean(hinge))

    total = terms[0]
    for term in terms[1:]:
        total = tz.add(total, term)
    return total, diags


def mc_loss(mags, margin: float, signed: bool = False) -> Tensor:
    value, _ = mc_loss_with_diagnostics(mags, margin, signed)
    return value


# ---------------------------------------------------------------------------
# Baseline magnitude objective and score regularizers


def rtfm_magnitude_hinge(mags, margin: float) -> Tensor:
    """max(0, margin - (mean abnormal top-k - mean normal top-k))."""
    normal, abnormal = _split_rows(mags)
    stacked = stack([m.values for m in mags])
    video_means = tz.mean(stacked, axis=1)  # [B]
    normal_mean = tz.mean(gather(video_means, np.array(normal)))
    abnormal_mean = tz.mean(gather(video_means, np.array(abnormal)))
    return tz.relu(margin - tz.sub(abnormal_mean, normal_mean))


def rtfm_baseline_loss(mags, scores: Tensor, labels, margin: float) -> Tensor:
    """Global magnitude separation hinge plus the same top-k score BCE."""
    return tz.add(rtfm_magnitude_hinge(mags, margin),
                  _selected_score_bce(scores, mags, labels))


def smoothness_sparsity(scores: Tensor, labels):
    """Score-sum and adjacent-difference terms over abnormal videos.

    Returned in the printed naming of the source formulation: the first
    value accumulates raw scores, the second squared adjacent differences;
    both are averaged over the abnormal-video count.
    """
    b, t = scores.shape
    rows = [i for i, y in enumerate(labels) if int(y) == 1]
    if not rows:
        return Tensor(0.0), Tensor(0.0)
    n = len(rows)
    base = np.array([[i * t + j for j in range(t)] for i in rows])
    grid = gather(scores, base)  # [n, T]
    term_sum = tz.sum_(grid) / n
    if t > 1:
        lead = gather(scores, base[:, :-1])
        trail = gather(scores, base[:, 1:])
        diff = tz.sub(lead, trail)
        term_diff = tz.sum_(tz.mul(diff, diff)) / n
    else:
        term_diff = Tensor(0.0)
    return term_sum, term_diff


# ---------------------------------------------------------------------------
# Weighted total


def total_loss(output, labels, k: int = 3, lambda_ts: float = 1.0,
               lambda_sp: float = 1.0, lambda_mc: float = 0.001,
               margin: float = 100.0, variant: str = "mc",
               signed_pair_distances: bool = False):
    """Weighted objective: sce + lambda_ts*ts + lambda_sp*sp + lambda_mc*mag.

    ``variant`` picks the magnitude term: the contrastive loss, the baseline
    separation hinge, or none. Returns the differentiable total and a float
    breakdown whose fields always satisfy the decomposition identity.
    """
    if variant not in LOSS_VARIANTS:
        raise ConfigError(f"loss variant must be one of {LOSS_VARIANTS}, got '{variant}'")
    mags = topk_magnitude_sets(output, labels, k)
    l_sce = _selected_score_bce(output.clip_scores, mags, labels)
    l_ts, l_sp = smoothness_sparsity(output.clip_scores, labels)
    diags = []
    if variant == "mc":
        l_mag, diags = mc_loss_with_diagnostics(mags, margin, signed_pair_distances)
    elif variant == "rtfm":
        l_mag = rtfm_magnitude_hinge(mags, margin)
    else:
        l_mag = None

    total = l_sce
    if lambda_ts != 0.0:
        total = tz.add(total, l_ts * lambda_ts)
    if lambda_sp != 0.0:
        total = tz.add(total, l_sp * lambda_sp)
    if l_mag is not None and lambda_mc != 0.0:
        total = tz.add(total, l_mag * lambda_mc)

    breakdown = LossBreakdown(
        l_sce=l_sce.item(), l_mc=l_mag.item() if l_mag is not None else 0.0,
        l_ts=l_ts.item(), l_sp=l_sp.item(), total=total.item(),
        variant=variant, pair_diagnostics=diags)
    return total, breakdown
