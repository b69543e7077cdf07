import numpy as np
import pytest

from mgfn import metrics
from mgfn.errors import UndefinedMetricError


# ---------------------------------------------------------------------------
# Brute-force oracles


def auc_pair_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                credit += 1.0
            elif p == n:
                credit += 0.5
    return credit / (len(pos) * len(neg))


def ap_rank_oracle(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    precisions = []
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


# ---------------------------------------------------------------------------
# ROC-AUC


def test_auc_perfect_separation():
    assert metrics.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_auc_all_ties_half():
    assert metrics.roc_auc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5


def test_auc_matches_pair_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(5, 21))
        scores = rng.choice([0.1, 0.25, 0.5, 0.7, 0.9], size=n)  # force ties
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        got = metrics.roc_auc(scores, labels)
        expect = auc_pair_oracle(list(scores), list(labels))
        assert got == expect


def test_auc_single_class_raises():
    with pytest.raises(UndefinedMetricError):
        metrics.roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        metrics.roc_auc([0.1, 0.2], [0, 0])


def test_auc_complement_identity_without_ties():
    rng = np.random.default_rng(1)
    scores = rng.permutation(20) / 20.0  # all distinct
    labels = rng.integers(0, 2, size=20)
    labels[0], labels[1] = 0, 1
    a = metrics.roc_auc(scores, labels)
    b = metrics.roc_auc(-scores, labels)
    assert abs(a + b - 1.0) < 1e-15


# ---------------------------------------------------------------------------
# Average precision


def test_ap_perfect_ranking():
    assert metrics.average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_ap_single_positive_ranked_last():
    n = 8
    scores = np.linspace(1.0, 0.1, n)
    labels = np.zeros(n, dtype=int)
    labels[-1] = 1  # lowest score
    assert abs(metrics.average_precision(scores, labels) - 1.0 / n) < 1e-15


def test_ap_matches_rank_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(5, 21))
        scores = rng.choice([0.1, 0.3, 0.5, 0.7], size=n)
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[0] = 1
        got = metrics.average_precision(scores, labels)
        expect = ap_rank_oracle(list(scores), list(labels))
        assert abs(got - expect) < 1e-12


def test_ap_no_positives_raises():
    with pytest.raises(UndefinedMetricError):
        metrics.average_precision([0.5, 0.6], [0, 0])


# ---------------------------------------------------------------------------
# Shared properties


def test_metrics_invariant_under_monotone_transforms():
    rng = np.random.default_rng(3)
    scores = rng.random(40)
    labels = rng.integers(0, 2, size=40)
    labels[:2] = [0, 1]
    base_auc = metrics.roc_auc(scores, labels)
    base_ap = metrics.average_precision(scores, labels)
    for transform in (np.exp, lambda s: 3.0 * s + 2.0, lambda s: s ** 3):
        assert abs(metrics.roc_auc(transform(scores), labels) - base_auc) < 1e-12
        assert abs(metrics.average_precision(transform(scores), labels) - base_ap) < 1e-12


def test_evaluate_frames_bundle():
    scores = [0.9, 0.2, 0.7, 0.1]
    labels = [1, 0, 1, 0]
    result = metrics.evaluate_frames(scores, labels, with_curves=True)
    assert result.auc == 1.0 and result.ap == 1.0
    assert result.n_frames == 4 and result.n_positive == 2
    assert result.roc_points is not None and result.pr_points is not None
    assert result.roc_points[-1].tolist() == [1.0, 1.0]
