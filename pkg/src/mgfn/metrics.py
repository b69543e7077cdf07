"""Frame-level ranking metrics with explicit tie handling.

ROC-AUC uses the rank-sum (Mann-Whitney) formulation, crediting tied
score pairs with 0.5. Average precision ranks by descending score with
ties broken by original index (stable), and equals the area under the
stepwise precision-recall curve. Both are invariant under strictly
increasing score transforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UndefinedMetricError


@dataclass
class EvalResult:
    auc: float
    ap: float
    n_frames: int
    n_positive: int
    roc_points: np.ndarray | None = None  # (fpr, tpr) rows
    pr_points: np.ndarray | None = None  # (recall, precision) rows

    def to_dict(self) -> dict:
        return {"auc": self.auc, "ap": self.ap,
                "n_frames": self.n_frames, "n_positive": self.n_positive}


def _check_binary(labels) -> np.ndarray:
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if not np.isin(y, (0, 1)).all():
        raise UndefinedMetricError("labels must be 0/1")
    return y


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the group average."""
    n = scores.size
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    boundaries = np.nonzero(np.diff(s_sorted))[0] + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])
    group_rank = (starts + ends + 1) / 2.0  # average of 1-based positions
    ranks = np.empty(n)
    ranks[order] = np.repeat(group_rank, ends - starts)
    return ranks


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), over all pos/neg pairs."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size != y.size:
        raise UndefinedMetricError(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both classes present")
    ranks = _average_ranks(s)
    rank_sum = ranks[y == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _descending_order(scores: np.ndarray) -> np.ndarray:
    # ties broken by original index (stable descending order)
    return np.lexsort((np.arange(scores.size), -scores))


def average_precision(scores, labels) -> float:
    """Mean precision at the rank of every positive, stable descending order."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size != y.size:
        raise UndefinedMetricError(f"{s.size} scores vs {y.size} labels")
    if y.sum() == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    ranked = y[_descending_order(s)]
    hits = np.cumsum(ranked)
    precision = hits / np.arange(1, y.size + 1)
    return float(precision[ranked == 1].mean())


def roc_curve(scores, labels) -> np.ndarray:
    """(fpr, tpr) points at every distinct threshold, descending."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-s, kind="stable")
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    distinct = np.nonzero(np.diff(np.concatenate([s[order], [np.nan]])))[0]
    n_pos = max(int(y.sum()), 1)
    n_neg = max(int((1 - y).sum()), 1)
    points = np.column_stack([fp[distinct] / n_neg, tp[distinct] / n_pos])
    return np.vstack([[0.0, 0.0], points])


def pr_curve(scores, labels) -> np.ndarray:
    """(recall, precision) points along the stable descending ranking."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    ranked = y[_descending_order(s)]
    hits = np.cumsum(ranked)
    precision = hits / np.arange(1, y.size + 1)
    recall = hits / max(int(y.sum()), 1)
    return np.column_stack([recall, precision])


def evaluate_frames(scores, labels, with_curves: bool = False) -> EvalResult:
    y = _check_binary(labels)
    result = EvalResult(auc=roc_auc(scores, labels), ap=average_precision(scores, labels),
                        n_frames=int(y.size), n_positive=int(y.sum()))
    if with_curves:
        result.roc_points = roc_curve(scores, labels)
        result.pr_points = pr_curve(scores, labels)
    return result
