import math
from types import SimpleNamespace

import numpy as np
import pytest

from mgfn import losses
from mgfn import tensor as tz
from mgfn.errors import ConfigError, DataError
from mgfn.tensor import Tape, Tensor


def fake_output(scores, magnitudes):
    return SimpleNamespace(clip_scores=Tensor(scores),
                           clip_magnitudes=Tensor(magnitudes))


def sets_from_tables(tables, labels):
    """MagnitudeSet list whose top-k values equal the given descending tables."""
    k = len(tables[0])
    t = k + 2
    mags = np.full((len(tables), t), -1e9)
    for i, row in enumerate(tables):
        mags[i, :k] = row
    out = fake_output(np.full((len(tables), t), 0.5), mags)
    return losses.topk_magnitude_sets(out, labels, k)


# ---------------------------------------------------------------------------
# Oracles


def mc_oracle(tables, labels, margin, signed=False):
    normal = [tab for tab, y in zip(tables, labels) if y == 0]
    abnormal = [tab for tab, y in zip(tables, labels) if y == 1]

    def same_d(tp, tq):
        diffs = [a - b for a in tp for b in tq]
        return min(diffs) if signed else max(abs(d) for d in diffs)

    def cross_d(tp, tu):
        diffs = [a - b for a in tp for b in tu]
        return max(diffs) if signed else min(abs(d) for d in diffs)

    def mean(vals):
        return sum(vals) / len(vals) if vals else 0.0

    same_n = [same_d(normal[i], normal[j])
              for i in range(len(normal)) for j in range(i + 1, len(normal))]
    same_a = [same_d(abnormal[i], abnormal[j])
              for i in range(len(abnormal)) for j in range(i + 1, len(abnormal))]
    cross = [max(0.0, margin - cross_d(p, u)) for p in normal for u in abnormal]
    return mean(same_n) + mean(same_a) + mean(cross)


def smooth_oracle(scores, labels):
    rows = [s for s, y in zip(scores, labels) if y == 1]
    term_sum = sum(sum(r) for r in rows) / len(rows)
    term_diff = sum(sum((r[j] - r[j + 1]) ** 2 for j in range(len(r) - 1))
                    for r in rows) / len(rows)
    return term_sum, term_diff


# ---------------------------------------------------------------------------
# Top-k magnitude selection


def test_topk_sets_descending_and_distinct():
    rng = np.random.default_rng(0)
    out = fake_output(rng.random((4, 8)), rng.random((4, 8)) * 10)
    sets = losses.topk_magnitude_sets(out, [0, 0, 1, 1], 3)
    for s in sets:
        vals = s.values.data
        assert np.all(np.diff(vals) <= 0)
        assert len(set(s.indices)) == 3


# ---------------------------------------------------------------------------
# sce


def test_sce_half_score_is_ln2():
    out = fake_output(np.full((2, 6), 0.5), np.arange(12, dtype=float).reshape(2, 6))
    val = losses.sce_loss(out, [0, 1], k=3).item()
    assert abs(val - math.log(2.0)) < 1e-12


def test_sce_perfect_scores_tiny():
    scores = np.zeros((2, 4))
    scores[0, :] = 1e-7  # normal video scored at the clamp floor
    scores[1, :] = 1.0 - 1e-7
    out = fake_output(scores, np.ones((2, 4)))
    assert losses.sce_loss(out, [0, 1], k=2).item() <= 1e-6


def test_sce_hand_oracle_b2():
    # magnitudes pick clips (2, 0) for video 0 and (1, 3) for video 1
    mags = np.array([[5.0, 1.0, 9.0, 0.0], [2.0, 8.0, 1.0, 7.0]])
    scores = np.array([[0.9, 0.1, 0.3, 0.5], [0.2, 0.6, 0.8, 0.4]])
    out = fake_output(scores, mags)
    got = losses.sce_loss(out, [0, 1], k=2).item()
    s0 = (0.3 + 0.9) / 2  # clips 2 then 0 (descending magnitude)
    s1 = (0.6 + 0.4) / 2  # clips 1 then 3
    expect = (-math.log(1 - s0) - math.log(s1)) / 2
    assert abs(got - expect) < 1e-12


# ---------------------------------------------------------------------------
# mc loss


@pytest.mark.parametrize("margin", [1.0, 10.0, 100.0])
def test_mc_zero_when_satisfied(margin):
    c1, c2 = 5.0, 5.0 + margin
    sets = sets_from_tables([[c1, c1], [c1, c1], [c2, c2], [c2, c2]], [0, 0, 1, 1])
    assert losses.mc_loss(sets, margin).item() == 0.0


@pytest.mark.parametrize("margin", [1.0, 10.0, 100.0])
def test_mc_equals_margin_when_all_identical(margin):
    sets = sets_from_tables([[3.0, 3.0]] * 4, [0, 0, 1, 1])
    assert abs(losses.mc_loss(sets, margin).item() - margin) < 1e-12


def test_mc_matches_enumeration_oracle_hand_table():
    tables = [[10.0, 8.0], [7.0, 5.0], [30.0, 20.0], [90.0, 60.0]]
    labels = [0, 0, 1, 1]
    sets = sets_from_tables(tables, labels)
    got = losses.mc_loss(sets, 100.0).item()
    expect = mc_oracle(tables, labels, 100.0)
    assert abs(got - expect) < 1e-12
    assert abs(expect - 143.5) < 1e-12  # hand computation


def test_mc_matches_enumeration_oracle_random_sweep():
    rng = np.random.default_rng(1)
    for _ in range(50):
        half = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        tables = [sorted(rng.random(k) * 20, reverse=True) for _ in range(2 * half)]
        labels = [0] * half + [1] * half
        margin = float(rng.choice([1.0, 10.0, 25.0]))
        sets = sets_from_tables(tables, labels)
        got = losses.mc_loss(sets, margin).item()
        assert abs(got - mc_oracle(tables, labels, margin)) < 1e-10


def test_mc_signed_variant_matches_signed_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        tables = [sorted(rng.random(3) * 20, reverse=True) for _ in range(4)]
        labels = [0, 0, 1, 1]
        sets = sets_from_tables(tables, labels)
        got = losses.mc_loss(sets, 10.0, signed=True).item()
        assert abs(got - mc_oracle(tables, labels, 10.0, signed=True)) < 1e-10


def test_mc_nonnegative_and_invariant_to_within_class_order():
    rng = np.random.default_rng(3)
    tables = [sorted(rng.random(3) * 30, reverse=True) for _ in range(6)]
    labels = [0, 0, 0, 1, 1, 1]
    base = losses.mc_loss(sets_from_tables(tables, labels), 50.0).item()
    assert base >= 0.0
    shuffled = [tables[1], tables[2], tables[0], tables[5], tables[3], tables[4]]
    again = losses.mc_loss(sets_from_tables(shuffled, labels), 50.0).item()
    assert abs(base - again) < 1e-10


def test_mc_requires_balanced_batch():
    sets = sets_from_tables([[1.0], [2.0], [3.0]], [0, 0, 1])
    with pytest.raises(DataError):
        losses.mc_loss(sets, 10.0)


def test_mc_subgradients_match_finite_differences():
    rng = np.random.default_rng(4)
    b, t, k, margin = 4, 6, 2, 5.0
    mags = rng.random((b, t)) * 10
    labels = [0, 0, 1, 1]

    def build(leaf):
        out = SimpleNamespace(clip_scores=None, clip_magnitudes=leaf)
        return losses.topk_magnitude_sets(out, labels, k)

    leaf = Tensor(mags, requires_grad=True)
    with Tape() as tape:
        value = losses.mc_loss(build(leaf), margin)
    tape.backward(value)
    analytic = leaf.grad.copy()

    # verify we are away from hinge/abs/topk kink points
    diags = losses.mc_loss_with_diagnostics(build(Tensor(mags)), margin)[1]
    assert all(abs(abs(d["distance"]) - margin) > 1e-3 for d in diags if d["kind"] == "cross")
    assert all(abs(d["distance"]) > 1e-3 for d in diags)

    eps = 1e-6
    fd = np.zeros_like(mags)
    for i in range(b):
        for j in range(t):
            for sign, slot in ((1, 0), (-1, 1)):
                mags[i, j] += sign * eps
                val = losses.mc_loss(build(Tensor(mags)), margin).item()
                mags[i, j] -= sign * eps
                fd[i, j] += val if slot == 0 else -val
    fd /= 2 * eps
    err = np.abs(fd - analytic) / np.maximum.reduce(
        [np.abs(fd), np.abs(analytic), np.full_like(fd, 1e-3)])
    assert err.max() < 1e-4


# ---------------------------------------------------------------------------
# smoothness / sparsity


def test_smooth_constant_scores():
    scores = np.full((2, 5), 0.3)
    ts, sp = losses.smoothness_sparsity(Tensor(scores), [0, 1])
    assert abs(ts.item() - 5 * 0.3) < 1e-12
    assert sp.item() == 0.0


def test_smooth_alternating_scores():
    t = 8
    scores = np.zeros((1, t))
    scores[0, 1::2] = 1.0
    ts, sp = losses.smoothness_sparsity(Tensor(scores), [1])
    assert sp.item() == t - 1


def test_smooth_matches_formula_oracle():
    rng = np.random.default_rng(5)
    scores = rng.random((4, 8))
    labels = [0, 1, 1, 0]
    ts, sp = losses.smoothness_sparsity(Tensor(scores), labels)
    ots, osp = smooth_oracle(scores.tolist(), labels)
    assert abs(ts.item() - ots) < 1e-12
    assert abs(sp.item() - osp) < 1e-12


def test_smooth_no_abnormal_videos_zero():
    ts, sp = losses.smoothness_sparsity(Tensor(np.random.rand(2, 4)), [0, 0])
    assert ts.item() == 0.0 and sp.item() == 0.0


# ---------------------------------------------------------------------------
# baseline magnitude objective


def test_rtfm_hinge_zero_when_separated():
    sets = sets_from_tables([[1.0, 1.0], [2.0, 2.0], [60.0, 60.0], [70.0, 70.0]],
                            [0, 0, 1, 1])
    assert losses.rtfm_magnitude_hinge(sets, 50.0).item() == 0.0


def test_rtfm_hinge_margin_when_equal():
    sets = sets_from_tables([[5.0, 5.0]] * 4, [0, 0, 1, 1])
    assert abs(losses.rtfm_magnitude_hinge(sets, 30.0).item() - 30.0) < 1e-12


def test_rtfm_baseline_hand_table():
    tables = [[10.0, 8.0], [6.0, 4.0], [20.0, 16.0], [30.0, 24.0]]
    labels = [0, 0, 1, 1]
    k, t = 2, 4
    mags = np.full((4, t), -1e9)
    scores = np.full((4, t), 0.5)
    for i, row in enumerate(tables):
        mags[i, :k] = row
    out = fake_output(scores, mags)
    sets = losses.topk_magnitude_sets(out, labels, k)
    got = losses.rtfm_baseline_loss(sets, out.clip_scores, labels, 25.0).item()
    normal_mean = (9.0 + 5.0) / 2
    abnormal_mean = (18.0 + 27.0) / 2
    hinge = max(0.0, 25.0 - (abnormal_mean - normal_mean))
    expect = hinge + math.log(2.0)  # every video score is 0.5
    assert abs(got - expect) < 1e-12


# ---------------------------------------------------------------------------
# total loss


def random_output(rng, b=4, t=8):
    raw = rng.standard_normal((b, t))
    scores = 1 / (1 + np.exp(-raw))
    return fake_output(scores, rng.random((b, t)) * 40)


def test_total_zero_weights_equals_sce():
    rng = np.random.default_rng(6)
    out = random_output(rng)
    labels = [0, 0, 1, 1]
    total, bd = losses.total_loss(out, labels, k=3, lambda_ts=0, lambda_sp=0,
                                  lambda_mc=0, variant="mc")
    assert total.item() == bd.l_sce
    assert bd.total == bd.l_sce


def test_total_breakdown_identity_random():
    rng = np.random.default_rng(7)
    for variant in ("mc", "rtfm", "sce"):
        out = random_output(rng)
        labels = [0, 1, 0, 1]
        total, bd = losses.total_loss(out, labels, k=2, lambda_ts=1.0, lambda_sp=1.0,
                                      lambda_mc=0.001, margin=100.0, variant=variant)
        recomputed = bd.l_sce + 1.0 * bd.l_ts + 1.0 * bd.l_sp + 0.001 * bd.l_mc
        assert abs(bd.total - recomputed) < 1e-12
        assert abs(total.item() - bd.total) < 1e-15


def test_total_rejects_unknown_variant():
    rng = np.random.default_rng(8)
    with pytest.raises(ConfigError):
        losses.total_loss(random_output(rng), [0, 1, 0, 1], variant="bogus")


def test_total_sce_variant_reports_zero_mc():
    rng = np.random.default_rng(9)
    _, bd = losses.total_loss(random_output(rng), [0, 0, 1, 1], variant="sce")
    assert bd.l_mc == 0.0


def test_mc_diagnostics_cover_every_pair():
    sets = sets_from_tables([[3.0, 1.0], [4.0, 2.0], [9.0, 5.0], [8.0, 6.0]],
                            [0, 0, 1, 1])
    _, diags = losses.mc_loss_with_diagnostics(sets, 10.0)
    kinds = [d["kind"] for d in diags]
    assert kinds.count("same_normal") == 1
    assert kinds.count("same_abnormal") == 1
    assert kinds.count("cross") == 4
