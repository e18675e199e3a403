"""Novel-class discovery: k-means partitioning of unknown-flagged samples.

kmeans here is deliberately not a library call: selection randomness is keyed
by (seed, sample id) rather than row position, so shuffling a dataset cannot
change the clustering, and all reductions run in a canonical id-sorted order
to keep results bit-identical across row permutations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil, sqrt

import numpy as np

from . import rng
from .errors import ArgumentError, DataError
from .store import EmbeddingSet

DEFAULT_K_CAP = 20


@dataclass
class ClusterResult:
    assignments: np.ndarray  # length-M ints in [0, k), original row order
    centroids: np.ndarray  # k x d
    inertia: float
    iterations: int
    k: int
    inertia_trace: list[float] = field(default_factory=list)


def _sq_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("mkd,mkd->mk", diff, diff)


def _kmeanspp_init(
    xc: np.ndarray, idc: np.ndarray, k: int, seed: int, restart: int
) -> np.ndarray:
    """Greedy k-means++ seeding; every draw is keyed by sample id, not row order.

    Each round samples a few candidates proportionally to squared distance
    (via exponential races, which are order-independent) and keeps the one
    that lowers the potential most.
    """
    m = xc.shape[0]
    n_candidates = 2 + int(np.log2(k)) if k > 1 else 1
    hashes = rng.raw64(rng.key(seed, "kpp-first", restart), idc.astype(np.uint64))
    chosen = [int(np.argmin(hashes))]
    d2 = _sq_distances(xc, xc[chosen[-1]][None, :])[:, 0]
    for r in range(1, k):
        # exponential race: the L smallest of -log(u)/w are L draws prop. to w
        u = rng.uniform_open(rng.key(seed, "kpp", restart, r), idc.astype(np.uint64))
        with np.errstate(divide="ignore"):
            race = -np.log(u) / d2
        race[d2 <= 0.0] = np.inf
        if not np.isfinite(race).any():
            # all remaining mass on already-chosen points (duplicates)
            free = np.setdiff1d(np.arange(m), np.asarray(chosen))
            pick = int(free[np.argmin(hashes[free])])
        else:
            n_cand = min(n_candidates, int(np.isfinite(race).sum()))
            cands = np.argpartition(race, n_cand - 1)[:n_cand]
            cands = cands[np.argsort(race[cands], kind="stable")]
            best_pot = np.inf
            pick = int(cands[0])
            for cand in cands:
                pot = float(
                    np.minimum(d2, _sq_distances(xc, xc[cand][None, :])[:, 0]).sum()
                )
                if pot < best_pot:
                    best_pot = pot
                    pick = int(cand)
        chosen.append(pick)
        d2 = np.minimum(d2, _sq_distances(xc, xc[pick][None, :])[:, 0])
    return xc[np.asarray(chosen)].copy()


def _lloyd(
    xc: np.ndarray,
    idc: np.ndarray,
    k: int,
    seed: int,
    restart: int,
    max_iter: int,
    tol: float,
) -> tuple[np.ndarray, np.ndarray, list[float], int]:
    m = xc.shape[0]
    centroids = _kmeanspp_init(xc, idc, k, seed, restart)
    assign = np.argmin(_sq_distances(xc, centroids), axis=1)
    trace: list[float] = []
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        new_centroids = centroids.copy()
        empties = []
        for c in range(k):
            members = assign == c
            if members.any():
                new_centroids[c] = xc[members].mean(axis=0)
            else:
                empties.append(c)
        if empties:
            # re-seed each empty centroid at the farthest point from its
            # assigned centroid; points already claimed stay unique
            dist_own = np.einsum(
                "md,md->m", xc - new_centroids[assign], xc - new_centroids[assign]
            )
            claimed: set[int] = set()
            for c in empties:
                masked = dist_own.copy()
                if claimed:
                    masked[list(claimed)] = -np.inf
                p = int(np.argmax(masked))
                claimed.add(p)
                new_centroids[c] = xc[p]
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        d2 = _sq_distances(xc, centroids)
        assign = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(m), assign].sum()))
        if shift <= tol:
            break
    return assign, centroids, trace, iterations


def kmeans(
    x: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 300,
    tol: float = 1e-6,
    ids: np.ndarray | None = None,
    n_init: int = 4,
) -> ClusterResult:
    """Lloyd's algorithm from greedy k-means++ seeding, deterministic given seed.

    Runs n_init independent seedings and keeps the lowest-inertia result
    (ties break toward the earlier restart).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ArgumentError(f"X must be 2-d, got ndim={x.ndim}")
    m = x.shape[0]
    if not (1 <= k <= m):
        raise ArgumentError(f"need M >= k >= 1, got M={m}, k={k}")
    if max_iter < 1 or tol < 0 or n_init < 1:
        raise ArgumentError("max_iter and n_init must be >= 1 and tol >= 0")
    if not np.isfinite(x).all():
        raise ArgumentError("X must be finite")
    if ids is None:
        ids = np.arange(m, dtype=np.int64)
    else:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape != (m,) or np.unique(ids).size != m:
            raise ArgumentError("ids must be unique and match X rows")

    # canonical id-ascending order: all arithmetic is row-order independent
    order = np.argsort(ids, kind="stable")
    xc = x[order]
    idc = ids[order]

    best = None
    for restart in range(n_init):
        run = _lloyd(xc, idc, k, seed, restart, max_iter, tol)
        if best is None or run[2][-1] < best[2][-1]:
            best = run
    assign, centroids, trace, iterations = best

    assignments = np.empty(m, dtype=np.int64)
    assignments[order] = assign
    return ClusterResult(
        assignments=assignments,
        centroids=centroids,
        inertia=trace[-1],
        iterations=iterations,
        k=k,
        inertia_trace=trace,
    )


def silhouette_mean(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette; singleton and zero-spread clusters score 0."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    m = x.shape[0]
    uniq = np.unique(labels)
    if m <= 1 or uniq.size < 2:
        return 0.0
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.einsum("ijd,ijd->ij", diff, diff))
    onehot = (labels[:, None] == uniq[None, :]).astype(np.float64)
    sums = dist @ onehot  # m x n_clusters: total distance to each cluster
    counts = onehot.sum(axis=0)
    own_col = np.searchsorted(uniq, labels)
    s = np.zeros(m, dtype=np.float64)
    for i in range(m):
        c = own_col[i]
        if counts[c] <= 1:
            continue
        a = sums[i, c] / (counts[c] - 1)
        other = [sums[i, j] / counts[j] for j in range(uniq.size) if j != c]
        b = min(other)
        denom = max(a, b)
        if denom > 0:
            s[i] = (b - a) / denom
    return float(s.mean())


def estimate_k(
    x: np.ndarray,
    k_min: int = 2,
    k_max: int = 2,
    seed: int = 0,
    ids: np.ndarray | None = None,
) -> int:
    """Silhouette-scan over [k_min, k_max]; ties break toward smaller k."""
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    if not (m >= k_max + 1 >= 3) or k_min < 2 or k_min > k_max:
        raise ArgumentError(
            f"need M >= k_max + 1 >= 3 and 2 <= k_min <= k_max; M={m}, "
            f"k_min={k_min}, k_max={k_max}"
        )
    best_k = k_min
    best_score = -np.inf
    for k in range(k_min, k_max + 1):
        res = kmeans(x, k, seed=rng.key(seed, "auto-k", k), ids=ids)
        score = silhouette_mean(x, res.assignments)
        if score > best_score:
            best_score = score
            best_k = k
    return best_k


def discover(
    x_unknown: EmbeddingSet, k: int | None, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Partition unknown-flagged samples into provisional classes.

    Returns (labels in [0, k'), centroids). A single sample forms one
    provisional class without clustering.
    """
    m = x_unknown.n
    if m < 1:
        raise DataError("discover needs at least one sample")
    feats = x_unknown.features.astype(np.float64)
    if m == 1:
        return np.zeros(1, dtype=np.int64), feats.copy()
    if k is not None:
        if not (1 <= k <= m):
            raise ArgumentError(f"k={k} invalid for M={m}")
        res = kmeans(feats, k, seed=seed, ids=x_unknown.ids)
        return res.assignments, res.centroids
    k_max = min(ceil(sqrt(m)), DEFAULT_K_CAP, m - 1)
    if k_max < 2:
        res = kmeans(feats, 1, seed=seed, ids=x_unknown.ids)
        return res.assignments, res.centroids
    k_est = estimate_k(feats, 2, k_max, seed=seed, ids=x_unknown.ids)
    res = kmeans(feats, k_est, seed=seed, ids=x_unknown.ids)
    return res.assignments, res.centroids


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect assignment on a square matrix (Kuhn-Munkres).

    O(n^3) shortest-augmenting-path form with row/column potentials.
    Returns (assignment with assignment[row] = col, total cost).
    """
    a = np.asarray(cost, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ArgumentError(f"cost matrix must be square, got {a.shape}")
    if not np.isfinite(a).all():
        raise ArgumentError("cost matrix must be finite")
    n = a.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0

    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j] = row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    assignment = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        assignment[p[j] - 1] = j - 1
    total = float(a[np.arange(n), assignment].sum())
    return assignment, total
