"""Metric kernels against brute-force oracles and closed forms."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from owlkit import metrics
from owlkit.errors import ArgumentError

finite_floats = st.floats(allow_nan=False, allow_infinity=False, width=32)


def auroc_pairwise_oracle(id_scores, ood_scores):
    wins = 0.0
    for a in id_scores:
        for b in ood_scores:
            if a > b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / (len(id_scores) * len(ood_scores))


def fpr_scan_oracle(id_scores, ood_scores, tpr):
    id_scores = np.asarray(id_scores, dtype=float)
    ood_scores = np.asarray(ood_scores, dtype=float)
    best = None
    for tau in np.unique(np.concatenate([id_scores, ood_scores])):
        if np.mean(id_scores >= tau) >= tpr:
            fpr = np.mean(ood_scores >= tau)
            best = fpr if best is None else min(best, fpr)
    return best


# ---------------------------------------------------------------------------
# AUROC
# ---------------------------------------------------------------------------

def test_auroc_perfect_separation():
    assert metrics.auroc([1.0, 1.0], [0.0, 0.0]) == 1.0


def test_auroc_all_ties():
    assert metrics.auroc([3.0] * 5, [3.0] * 7) == 0.5


def test_auroc_matches_pairwise_oracle_with_ties():
    rs = np.random.RandomState(0)
    for _ in range(50):
        id_s = np.round(rs.randn(100), 1)  # rounding injects ties
        ood_s = np.round(rs.randn(100) - 0.5, 1)
        got = metrics.auroc(id_s, ood_s)
        want = auroc_pairwise_oracle(id_s, ood_s)
        assert abs(got - want) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(
    st.lists(finite_floats, min_size=1, max_size=30),
    st.lists(finite_floats, min_size=1, max_size=30),
)
def test_auroc_complement_symmetry(a, b):
    assert abs(metrics.auroc(a, b) + metrics.auroc(b, a) - 1.0) <= 1e-12


def test_auroc_invariant_under_monotone_transform():
    rs = np.random.RandomState(1)
    a, b = rs.randn(50), rs.randn(60)
    base = metrics.auroc(a, b)
    for f in (lambda x: 3 * x + 2, np.tanh, lambda x: np.exp(x / 4)):
        assert abs(metrics.auroc(f(a), f(b)) - base) <= 1e-12


def test_auroc_empty_side_rejected():
    with pytest.raises(ArgumentError):
        metrics.auroc([], [1.0])


# ---------------------------------------------------------------------------
# FPR at TPR
# ---------------------------------------------------------------------------

def test_fpr_perfect_separation():
    assert metrics.fpr_at_tpr([2.0, 3.0], [0.0, 1.0], 0.95) == 0.0


def test_fpr_identical_ranges():
    id_s = np.arange(1, 101, dtype=float)
    ood_s = np.arange(1, 101, dtype=float)
    got = metrics.fpr_at_tpr(id_s, ood_s, 0.95)
    assert got == pytest.approx(0.95, abs=1e-12)
    assert got == pytest.approx(fpr_scan_oracle(id_s, ood_s, 0.95), abs=1e-12)
    assert got >= 0.95  # identical distributions stay above the target


def test_fpr_matches_scan_oracle_random():
    rs = np.random.RandomState(2)
    for _ in range(20):
        id_s = np.round(rs.randn(60), 1)
        ood_s = np.round(rs.randn(40) - 0.3, 1)
        got = metrics.fpr_at_tpr(id_s, ood_s, 0.9)
        assert got == pytest.approx(fpr_scan_oracle(id_s, ood_s, 0.9), abs=1e-12)


def test_aupr_perfect_and_bounds():
    assert metrics.aupr_in([2.0, 3.0], [0.0, 1.0]) == pytest.approx(1.0)
    rs = np.random.RandomState(3)
    v = metrics.aupr_in(rs.randn(50), rs.randn(50))
    assert 0.0 <= v <= 1.0


def test_threshold_for_tpr_examples():
    assert metrics.threshold_for_tpr(np.arange(1, 101, dtype=float), 0.95) == 6.0
    assert metrics.threshold_for_tpr(np.full(10, 4.2), 0.5) == 4.2
    assert metrics.threshold_for_tpr(np.arange(1, 101, dtype=float), 1.0) == 1.0


# ---------------------------------------------------------------------------
# Accuracy family
# ---------------------------------------------------------------------------

def test_accuracy_trivial():
    assert metrics.accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert metrics.accuracy([1, 2, 3], [2, 3, 1]) == 0.0


def test_accuracy_matches_counting_oracle():
    rs = np.random.RandomState(4)
    pred = rs.randint(0, 5, 200)
    truth = rs.randint(0, 5, 200)
    want = sum(int(p == t) for p, t in zip(pred, truth)) / 200
    assert metrics.accuracy(pred, truth) == want


def test_per_class_accuracy_and_confusion():
    pred = [0, 0, 1, 1, 2]
    truth = [0, 1, 1, 1, 2]
    pca = metrics.per_class_accuracy(pred, truth)
    assert pca == {0: 1.0, 1: pytest.approx(2 / 3), 2: 1.0}
    conf = metrics.confusion(pred, truth)
    assert conf[1, 0] == 1 and conf[1, 1] == 2 and conf[0, 0] == 1 and conf[2, 2] == 1
    assert conf.sum() == 5


def test_length_mismatch_rejected():
    with pytest.raises(ArgumentError):
        metrics.accuracy([1], [1, 2])


# ---------------------------------------------------------------------------
# Clustering metrics
# ---------------------------------------------------------------------------

def nmi_naive(a, b):
    a, b = np.asarray(a), np.asarray(b)
    n = a.size
    ua, ub = np.unique(a), np.unique(b)
    mi = 0.0
    for x in ua:
        for y in ub:
            pxy = np.sum((a == x) & (b == y)) / n
            if pxy > 0:
                px = np.sum(a == x) / n
                py = np.sum(b == y) / n
                mi += pxy * math.log(pxy / (px * py))
    ha = -sum(
        (np.sum(a == x) / n) * math.log(np.sum(a == x) / n) for x in ua
    )
    hb = -sum(
        (np.sum(b == y) / n) * math.log(np.sum(b == y) / n) for y in ub
    )
    denom = (ha + hb) / 2
    return 1.0 if denom == 0 else mi / denom


def test_identical_partitions_score_one():
    labels = [0, 0, 1, 1, 2, 2]
    relabeled = [5, 5, 3, 3, 9, 9]
    assert metrics.nmi(labels, relabeled) == pytest.approx(1.0)
    assert metrics.purity(relabeled, labels) == 1.0
    assert metrics.cluster_accuracy(relabeled, labels) == 1.0


def test_single_cluster_purity():
    assert metrics.purity([0, 0, 0, 0], [0, 0, 1, 1]) == 0.5


def test_clustering_metrics_match_naive_oracle():
    rs = np.random.RandomState(5)
    for _ in range(20):
        a = rs.randint(0, 4, 60)
        b = rs.randint(0, 3, 60)
        assert metrics.nmi(a, b) == pytest.approx(nmi_naive(a, b), abs=1e-9)
        cont = np.zeros((4, 3))
        for x, y in zip(a, b):
            cont[x, y] += 1
        assert metrics.purity(a, b) == pytest.approx(
            cont.max(axis=1).sum() / 60, abs=1e-12
        )


def test_nmi_symmetry():
    rs = np.random.RandomState(6)
    a = rs.randint(0, 4, 80)
    b = rs.randint(0, 5, 80)
    assert metrics.nmi(a, b) == pytest.approx(metrics.nmi(b, a), abs=1e-12)


def test_cluster_accuracy_relabel_invariance():
    rs = np.random.RandomState(7)
    a = rs.randint(0, 4, 100)
    b = rs.randint(0, 4, 100)
    base = metrics.cluster_accuracy(a, b)
    perm = np.array([2, 0, 3, 1])
    assert metrics.cluster_accuracy(perm[a], b) == pytest.approx(base)
    assert metrics.cluster_accuracy(a, perm[b]) == pytest.approx(base)


def test_cluster_accuracy_rectangular_padding():
    # 3 predicted clusters against 2 truth classes: the padded Hungarian
    # match assigns each cluster a distinct class, so over-clustering costs
    pred = [0, 0, 1, 1, 2, 2]
    truth = [0, 0, 1, 1, 1, 1]
    assert metrics.cluster_accuracy(pred, truth) == pytest.approx(4 / 6)


# ---------------------------------------------------------------------------
# Session aggregates
# ---------------------------------------------------------------------------

def test_avg_accuracy_published_values():
    assert metrics.avg_accuracy([91.27, 50.29]) == pytest.approx(70.78, abs=0.005)
    assert metrics.avg_accuracy([91.27, 42.11]) == pytest.approx(66.69, abs=0.005)
    assert metrics.avg_accuracy([91.27, 28.89]) == pytest.approx(60.08, abs=0.005)
    assert metrics.avg_accuracy([77.7]) == 77.7


def test_avg_accuracy_constant_vector():
    assert metrics.avg_accuracy([42.0] * 9) == 42.0


def test_forgetting():
    const = np.full((3, 3), 0.8)
    assert metrics.forgetting(const) == 0.0
    mat = np.array(
        [
            [0.9, 0.0, 0.0],
            [0.8, 0.7, 0.0],
            [0.6, 0.5, 0.9],
        ]
    )
    # task 0: max prior 0.9 -> final 0.6; task 1: 0.7 -> 0.5
    assert metrics.forgetting(mat) == pytest.approx(((0.9 - 0.6) + (0.7 - 0.5)) / 2)
    assert metrics.forgetting([[1.0]]) == 0.0


def test_round_half_up():
    assert metrics.round_half_up(70.775) == 70.78
    assert metrics.round_half_up(70.784) == 70.78
    assert metrics.round_half_up(0.005) == 0.01
    assert metrics.round_half_up(2.675) == 2.68  # plain round() gives 2.67
