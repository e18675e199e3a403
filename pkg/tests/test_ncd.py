"""Clustering kernels: Hungarian vs brute force, Lloyd's properties, auto-k."""

import itertools

import numpy as np
import pytest

from owlkit import metrics, ncd, rng, store
from owlkit.errors import ArgumentError, DataError


def brute_force_assignment(cost):
    n = cost.shape[0]
    best_perm, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        c = sum(cost[i, perm[i]] for i in range(n))
        if c < best_cost:
            best_cost, best_perm = c, perm
    return best_perm, best_cost


def blobs(centers, n_per, sigma, seed):
    rs = np.random.RandomState(seed)
    xs = [rs.randn(n_per, len(centers[0])) * sigma + c for c in centers]
    y = np.repeat(np.arange(len(centers)), n_per)
    return np.concatenate(xs), y


# ---------------------------------------------------------------------------
# Hungarian
# ---------------------------------------------------------------------------

def test_hungarian_2x2():
    assignment, cost = ncd.hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
    np.testing.assert_array_equal(assignment, [0, 1])
    assert cost == 2.0


def test_hungarian_identity_structured():
    cost = np.ones((5, 5)) - np.eye(5)
    assignment, total = ncd.hungarian(cost)
    np.testing.assert_array_equal(assignment, np.arange(5))
    assert total == 0.0


def test_hungarian_matches_brute_force_on_random_6x6():
    rs = np.random.RandomState(0)
    for _ in range(200):
        cost = rs.randn(6, 6)
        _, got = ncd.hungarian(cost)
        _, want = brute_force_assignment(cost)
        assert got == pytest.approx(want, abs=1e-12)


def test_hungarian_beats_random_permutations():
    rs = np.random.RandomState(1)
    cost = rs.rand(12, 12)
    _, got = ncd.hungarian(cost)
    for _ in range(200):
        perm = rs.permutation(12)
        assert got <= cost[np.arange(12), perm].sum() + 1e-12


def test_hungarian_assignment_is_permutation():
    rs = np.random.RandomState(2)
    a, _ = ncd.hungarian(rs.randn(9, 9))
    np.testing.assert_array_equal(np.sort(a), np.arange(9))


def test_hungarian_rejects_nonsquare():
    with pytest.raises(ArgumentError):
        ncd.hungarian(np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def test_kmeans_k1_closed_form():
    rs = np.random.RandomState(3)
    x = rs.randn(40, 5)
    res = ncd.kmeans(x, 1, seed=0)
    np.testing.assert_allclose(res.centroids[0], x.mean(axis=0), atol=1e-12)
    want_inertia = ((x - x.mean(axis=0)) ** 2).sum()
    assert res.inertia == pytest.approx(want_inertia, rel=1e-12)
    assert (res.assignments == 0).all()


def test_kmeans_two_singletons():
    x = np.array([[0.0, 0.0], [10.0, 10.0]])
    res = ncd.kmeans(x, 2, seed=0)
    assert res.inertia == 0.0
    assert set(res.assignments.tolist()) == {0, 1}


def test_kmeans_three_blobs_high_accuracy():
    centers = [(0, 0), (10, 0), (0, 10)]
    x, y = blobs(centers, 100, 0.5, seed=4)
    res = ncd.kmeans(x, 3, seed=11)
    assert metrics.cluster_accuracy(res.assignments, y) >= 0.99


def test_kmeans_inertia_monotone_on_random_instances():
    rs = np.random.RandomState(5)
    for trial in range(100):
        m = rs.randint(8, 40)
        d = rs.randint(1, 5)
        k = rs.randint(1, min(m, 6))
        x = rs.randn(m, d)
        res = ncd.kmeans(x, k, seed=trial)
        for a, b in zip(res.inertia_trace, res.inertia_trace[1:]):
            assert b <= a * (1 + 1e-9) + 1e-12


def test_kmeans_inertia_matches_recomputation():
    rs = np.random.RandomState(6)
    x = rs.randn(60, 3)
    res = ncd.kmeans(x, 4, seed=2)
    d2 = ((x - res.centroids[res.assignments]) ** 2).sum()
    assert res.inertia == pytest.approx(d2, rel=1e-6)


def test_kmeans_no_empty_clusters():
    # duplicated points force empty-cluster repair paths
    x = np.array([[0.0, 0.0]] * 10 + [[5.0, 5.0]] * 10 + [[9.0, 0.0]] * 2)
    res = ncd.kmeans(x, 3, seed=1)
    assert set(res.assignments.tolist()) == {0, 1, 2}


def test_kmeans_permutation_equivariance():
    rs = np.random.RandomState(7)
    x = rs.randn(50, 4)
    ids = np.arange(50, dtype=np.int64)
    base = ncd.kmeans(x, 3, seed=9, ids=ids)
    perm = rs.permutation(50)
    permuted = ncd.kmeans(x[perm], 3, seed=9, ids=ids[perm])
    np.testing.assert_array_equal(permuted.assignments, base.assignments[perm])
    np.testing.assert_array_equal(permuted.centroids, base.centroids)
    assert permuted.inertia == base.inertia


def test_kmeans_deterministic():
    rs = np.random.RandomState(8)
    x = rs.randn(30, 3)
    a = ncd.kmeans(x, 3, seed=5)
    b = ncd.kmeans(x, 3, seed=5)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    np.testing.assert_array_equal(a.centroids, b.centroids)


def test_kmeans_rejects_k_above_m():
    with pytest.raises(ArgumentError):
        ncd.kmeans(np.zeros((2, 2)), 3, seed=0)


# ---------------------------------------------------------------------------
# Silhouette / estimate_k
# ---------------------------------------------------------------------------

def silhouette_naive(x, labels):
    m = x.shape[0]
    vals = []
    for i in range(m):
        own = labels[i]
        own_idx = [j for j in range(m) if labels[j] == own and j != i]
        if not own_idx:
            vals.append(0.0)
            continue
        a = np.mean([np.linalg.norm(x[i] - x[j]) for j in own_idx])
        bs = []
        for c in set(labels.tolist()) - {own}:
            idx = [j for j in range(m) if labels[j] == c]
            bs.append(np.mean([np.linalg.norm(x[i] - x[j]) for j in idx]))
        b = min(bs)
        denom = max(a, b)
        vals.append(0.0 if denom == 0 else (b - a) / denom)
    return float(np.mean(vals))


def test_silhouette_matches_naive_oracle():
    rs = np.random.RandomState(9)
    x = rs.randn(40, 3)
    labels = rs.randint(0, 4, 40)
    got = ncd.silhouette_mean(x, labels)
    assert got == pytest.approx(silhouette_naive(x, labels), abs=1e-10)


def test_estimate_k_two_blobs():
    x, _ = blobs([(0, 0), (12, 0)], 40, 0.6, seed=10)
    assert ncd.estimate_k(x, 2, 5, seed=0) == 2


def test_estimate_k_four_blobs():
    x, _ = blobs([(0, 0), (14, 0), (0, 14), (14, 14)], 40, 0.6, seed=11)
    assert ncd.estimate_k(x, 2, 8, seed=0) == 4


def test_estimate_k_identical_points_returns_k_min():
    x = np.ones((20, 3))
    assert ncd.estimate_k(x, 2, 5, seed=0) == 2


def test_estimate_k_rejects_small_m():
    with pytest.raises(ArgumentError):
        ncd.estimate_k(np.zeros((3, 2)), 2, 3, seed=0)


# ---------------------------------------------------------------------------
# discover
# ---------------------------------------------------------------------------

def _eset(x, ids=None):
    return store.EmbeddingSet(np.asarray(x, dtype=np.float32), ids=ids)


def test_discover_three_blobs_auto_k():
    x, y = blobs([(0, 0, 0), (12, 0, 0), (0, 12, 0)], 60, 0.5, seed=12)
    labels, centroids = ncd.discover(_eset(x), None, seed=3)
    assert centroids.shape[0] == 3
    assert metrics.cluster_accuracy(labels, y) >= 0.99


def test_discover_given_k_one():
    x, _ = blobs([(0, 0), (9, 9)], 10, 0.5, seed=13)
    labels, centroids = ncd.discover(_eset(x), 1, seed=0)
    assert (labels == 0).all()
    assert centroids.shape == (1, 2)


def test_discover_singleton_convention():
    labels, centroids = ncd.discover(_eset([[1.5, 2.5]]), None, seed=0)
    np.testing.assert_array_equal(labels, [0])
    np.testing.assert_allclose(centroids, [[1.5, 2.5]], atol=1e-7)


def test_discover_empty_rejected():
    with pytest.raises(DataError):
        ncd.discover(_eset(np.zeros((0, 2))), None, seed=0)


def test_discover_deterministic_given_seed():
    x, _ = blobs([(0, 0), (10, 0), (0, 10)], 30, 0.6, seed=14)
    l1, c1 = ncd.discover(_eset(x), None, seed=77)
    l2, c2 = ncd.discover(_eset(x), None, seed=77)
    np.testing.assert_array_equal(l1, l2)
    np.testing.assert_array_equal(c1, c2)
