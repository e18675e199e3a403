"""Evaluation metric kernels: accuracy family, detection, clustering, forgetting.

All functions are pure, take array-likes, and compute in float64. Score
convention everywhere: higher = more in-distribution (ID is the positive
class). Percentages are only rounded at the report boundary (round_half_up).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import ArgumentError
from .ncd import hungarian


@dataclass
class DetectionReport:
    auroc: float
    aupr_in: float
    fpr_at_tpr: float
    tpr_target: float
    n_id: int
    n_ood: int


def _as_scores(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ArgumentError(f"{name} must be non-empty")
    return arr


def _midranks(scores: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing their average rank."""
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts).astype(np.float64)
    starts = ends - counts + 1.0
    mid = (starts + ends) / 2.0
    return mid[inverse]


def auroc(id_scores, ood_scores) -> float:
    """P(random ID score > random OOD score), ties credited 0.5."""
    s_id = _as_scores(id_scores, "id_scores")
    s_ood = _as_scores(ood_scores, "ood_scores")
    n_id, n_ood = s_id.size, s_ood.size
    ranks = _midranks(np.concatenate([s_id, s_ood]))
    rank_sum_id = float(ranks[:n_id].sum())
    return (rank_sum_id - n_id * (n_id + 1) / 2.0) / (n_id * n_ood)


def threshold_for_tpr(id_scores: np.ndarray, tpr: float) -> float:
    """Largest tau such that the fraction of id_scores >= tau is >= tpr."""
    s = np.sort(np.asarray(id_scores, dtype=np.float64))[::-1]
    n = s.size
    if n == 0:
        raise ArgumentError("id_scores must be non-empty")
    if not (0.0 < tpr <= 1.0):
        raise ArgumentError(f"tpr must be in (0, 1], got {tpr}")
    m = int(math.ceil(tpr * n - 1e-9))
    m = min(max(m, 1), n)
    return float(s[m - 1])


def fpr_at_tpr(id_scores, ood_scores, tpr: float = 0.95) -> float:
    """FPR at the most selective threshold still reaching TPR >= tpr."""
    s_id = _as_scores(id_scores, "id_scores")
    s_ood = _as_scores(ood_scores, "ood_scores")
    if not (0.0 < tpr < 1.0):
        raise ArgumentError(f"tpr must be in (0, 1), got {tpr}")
    tau = threshold_for_tpr(s_id, tpr)
    return float(np.mean(s_ood >= tau))


def aupr_in(id_scores, ood_scores) -> float:
    """Average precision with ID as the positive class (step interpolation)."""
    s_id = _as_scores(id_scores, "id_scores")
    s_ood = _as_scores(ood_scores, "ood_scores")
    scores = np.concatenate([s_id, s_ood])
    positive = np.concatenate(
        [np.ones(s_id.size, dtype=bool), np.zeros(s_ood.size, dtype=bool)]
    )
    # process distinct thresholds high-to-low so ties move together
    order = np.argsort(-scores, kind="mergesort")
    scores, positive = scores[order], positive[order]
    boundaries = np.nonzero(np.diff(scores))[0]
    cut_ends = np.append(boundaries, scores.size - 1)
    tp = np.cumsum(positive)[cut_ends].astype(np.float64)
    taken = (cut_ends + 1).astype(np.float64)
    precision = tp / taken
    recall = tp / s_id.size
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def detection_report(id_scores, ood_scores, tpr_target: float = 0.95) -> DetectionReport:
    s_id = _as_scores(id_scores, "id_scores")
    s_ood = _as_scores(ood_scores, "ood_scores")
    return DetectionReport(
        auroc=auroc(s_id, s_ood),
        aupr_in=aupr_in(s_id, s_ood),
        fpr_at_tpr=fpr_at_tpr(s_id, s_ood, tpr_target),
        tpr_target=tpr_target,
        n_id=s_id.size,
        n_ood=s_ood.size,
    )


# ---------------------------------------------------------------------------
# Accuracy family
# ---------------------------------------------------------------------------

def _paired(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.int64).ravel()
    t = np.asarray(truth, dtype=np.int64).ravel()
    if p.size != t.size:
        raise ArgumentError(f"length mismatch: pred {p.size} vs truth {t.size}")
    if p.size == 0:
        raise ArgumentError("empty inputs")
    return p, t


def accuracy(pred, truth) -> float:
    p, t = _paired(pred, truth)
    return float(np.mean(p == t))


def per_class_accuracy(pred, truth) -> dict[int, float]:
    p, t = _paired(pred, truth)
    return {
        int(c): float(np.mean(p[t == c] == c))
        for c in np.unique(t)
    }


def confusion(pred, truth) -> np.ndarray:
    """C x C counts, rows = truth, columns = prediction."""
    p, t = _paired(pred, truth)
    c = int(max(p.max(), t.max())) + 1
    mat = np.zeros((c, c), dtype=np.int64)
    np.add.at(mat, (t, p), 1)
    return mat


# ---------------------------------------------------------------------------
# Clustering metrics
# ---------------------------------------------------------------------------

def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    mat = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(mat, (ai, bi), 1)
    return mat


def nmi(a, b) -> float:
    """Normalized mutual information, arithmetic-mean normalization."""
    pa, pb = _paired(a, b)
    cont = _contingency(pa, pb).astype(np.float64)
    n = cont.sum()
    pij = cont / n
    pi = pij.sum(axis=1)
    pj = pij.sum(axis=0)
    nz = pij > 0
    outer = np.outer(pi, pj)
    mi = float(np.sum(pij[nz] * np.log(pij[nz] / outer[nz])))
    ha = float(-np.sum(pi[pi > 0] * np.log(pi[pi > 0])))
    hb = float(-np.sum(pj[pj > 0] * np.log(pj[pj > 0])))
    denom = (ha + hb) / 2.0
    if denom == 0.0:
        # both partitions trivial -> identical up to relabeling
        return 1.0
    return min(max(mi / denom, 0.0), 1.0)


def purity(pred_clusters, truth) -> float:
    p, t = _paired(pred_clusters, truth)
    cont = _contingency(p, t)
    return float(cont.max(axis=1).sum() / cont.sum())


def cluster_accuracy(pred_clusters, truth) -> float:
    """Hungarian-matched accuracy on the overlap matrix padded to square."""
    p, t = _paired(pred_clusters, truth)
    cont = _contingency(p, t)
    size = max(cont.shape)
    padded = np.zeros((size, size), dtype=np.float64)
    padded[: cont.shape[0], : cont.shape[1]] = cont
    _, neg_overlap = hungarian(-padded)
    return float(-neg_overlap / p.size)


# ---------------------------------------------------------------------------
# Session aggregates
# ---------------------------------------------------------------------------

def avg_accuracy(session_accs) -> float:
    accs = np.asarray(session_accs, dtype=np.float64).ravel()
    if accs.size == 0:
        raise ArgumentError("session_accs must be non-empty")
    return float(np.mean(accs))


def forgetting(acc_matrix) -> float:
    """Mean over tasks of (max prior accuracy - final accuracy).

    acc_matrix[t][j] = accuracy on task j measured after session t
    (lower-triangular: defined for j <= t).
    """
    mat = np.asarray(acc_matrix, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or mat.shape[0] == 0:
        raise ArgumentError(f"acc_matrix must be square and non-empty, got {mat.shape}")
    t_final = mat.shape[0] - 1
    if t_final == 0:
        return 0.0
    drops = [
        float(np.max(mat[j:t_final, j]) - mat[t_final, j])
        for j in range(t_final)
    ]
    return float(np.mean(drops))


def round_half_up(x: float, decimals: int = 2) -> float:
    """Report-boundary rounding (0.005 always goes up)."""
    q = Decimal(10) ** -decimals
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))
