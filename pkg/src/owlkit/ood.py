"""Post-hoc OOD scoring over (feature, logit) pairs.

Convention for every method: HIGHER score = more in-distribution. Methods:

  msp       max softmax probability
  mls       max logit
  energy    T * logsumexp(logits / T)
  tsoftmax  max softmax of temperature-scaled logits (T defaults to 1000)
  mds       negative min Mahalanobis distance to a class mean, shared
            shrunk covariance
  vim       max logit minus alpha * norm of the residual outside the
            principal training subspace
  knn       negative distance to the k-th nearest L2-normalized train feature

Fitting holds out a deterministic 10% of the training set by sample id
(id % 10 == 7) for calibration scores; all statistics come from the
remaining 90%.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ArgumentError, DataError, NumericError, ShapeError, StateError
from .metrics import threshold_for_tpr
from .store import EmbeddingSet

METHODS = ("msp", "mls", "energy", "tsoftmax", "mds", "vim", "knn")
_LOGIT_ONLY = ("msp", "mls", "energy", "tsoftmax")
_EPS = 1e-12


@dataclass
class ScorerConfig:
    method: str = "msp"
    temperature: Optional[float] = None  # None -> 1000 for tsoftmax, else 1
    vim_variance_target: float = 0.90
    vim_dim_override: Optional[int] = None
    knn_k: int = 50
    shrinkage_scale: float = 1e-6

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ArgumentError(f"unknown OOD method {self.method!r}")
        if self.temperature is None:
            self.temperature = 1000.0 if self.method == "tsoftmax" else 1.0
        if self.temperature <= 0:
            raise ArgumentError("temperature must be > 0")
        if not (0.0 < self.vim_variance_target <= 1.0):
            raise ArgumentError("vim_variance_target must be in (0, 1]")
        if self.vim_dim_override is not None and self.vim_dim_override < 1:
            raise ArgumentError("vim_dim_override must be >= 1")
        if self.knn_k < 1:
            raise ArgumentError("knn_k must be >= 1")
        if self.shrinkage_scale <= 0:
            raise ArgumentError("shrinkage_scale must be > 0")


@dataclass
class FittedScorer:
    """Immutable fitted scoring artifact; calibrate returns an updated copy."""

    config: ScorerConfig
    class_ids: Optional[np.ndarray] = None  # classes behind class_means rows
    class_means: Optional[np.ndarray] = None
    precision_factor: Optional[np.ndarray] = None  # L with L L^T = inv(Sigma)
    principal_basis: Optional[np.ndarray] = None  # d x p, orthonormal columns
    center: Optional[np.ndarray] = None
    alpha: Optional[float] = None
    train_features: Optional[np.ndarray] = None  # knn bank, row-normalized
    id_val_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    threshold: Optional[float] = None
    target_tpr: Optional[float] = None
    fit_features: Optional[np.ndarray] = None  # retained only for full refit
    fit_labels: Optional[np.ndarray] = None


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, _EPS)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]


def _fit_stats(
    config: ScorerConfig,
    feats: np.ndarray,
    labels: np.ndarray,
    classifier,
) -> dict:
    """Statistics the configured method needs, computed in f64."""
    stats: dict = {}
    if config.method == "mds":
        classes = np.unique(labels)
        counts = np.array([(labels == c).sum() for c in classes])
        if (counts < 2).any():
            bad = classes[counts < 2].tolist()
            raise DataError(f"mds needs >= 2 fit samples per class, short: {bad}")
        means = np.stack([feats[labels == c].mean(axis=0) for c in classes])
        centered = feats - means[np.searchsorted(classes, labels)]
        d = feats.shape[1]
        sigma = centered.T @ centered / feats.shape[0]
        eps = config.shrinkage_scale * np.trace(sigma) / d
        sigma_shrunk = sigma + eps * np.eye(d)
        try:
            precision = np.linalg.inv(sigma_shrunk)
            factor = np.linalg.cholesky(precision)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"covariance not invertible despite shrinkage: {exc}")
        stats.update(class_ids=classes, class_means=means, precision_factor=factor)
    elif config.method == "vim":
        center = feats.mean(axis=0)
        centered = feats - center
        sigma = centered.T @ centered / max(feats.shape[0], 1)
        evals, evecs = np.linalg.eigh(sigma)
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        if config.vim_dim_override is not None:
            p = min(config.vim_dim_override, feats.shape[1])
        else:
            total = float(evals.sum())
            if total <= 0.0:
                p = 1
            else:
                frac = np.cumsum(evals) / total
                p = int(np.searchsorted(frac, config.vim_variance_target - 1e-12) + 1)
        basis = np.ascontiguousarray(evecs[:, :p])
        residual = centered - (centered @ basis) @ basis.T
        res_norms = np.sqrt((residual**2).sum(axis=1))
        max_logits = classifier.logits(feats).max(axis=1)
        alpha = float(max_logits.mean() / max(res_norms.mean(), _EPS))
        stats.update(center=center, principal_basis=basis, alpha=alpha)
    elif config.method == "knn":
        stats.update(train_features=_normalize_rows(feats))
    return stats


def fit_scorer(
    config: ScorerConfig,
    train: EmbeddingSet,
    classifier,
    retain_fit: bool = False,
) -> FittedScorer:
    """Fit statistics on 90% of train (by id hash) and score the held-out 10%.

    retain_fit keeps the fit split inside the artifact so the full-refit
    flag of the orchestrator can recompute covariance/subspace later.
    """
    if train.labels is None:
        raise DataError("scorer fitting needs a labeled training set")
    if train.n < 2:
        raise DataError("scorer fitting needs at least two samples")
    if classifier.class_count <= int(train.labels.max()):
        raise DataError("classifier does not cover all training classes")
    feats = train.features.astype(np.float64)
    labels = train.labels

    val_mask = (train.ids % 10) == 7
    fit_mask = ~val_mask
    if not fit_mask.any():
        fit_mask = np.ones(train.n, dtype=bool)
    if not val_mask.any():
        # tiny datasets: fall back to scoring the whole set
        val_mask = np.ones(train.n, dtype=bool)

    stats = _fit_stats(config, feats[fit_mask], labels[fit_mask], classifier)
    scorer = FittedScorer(config=config, **stats)
    val_feats = feats[val_mask]
    scorer = dataclasses.replace(
        scorer,
        id_val_scores=score_batch(scorer, val_feats, classifier.logits(val_feats)),
        fit_features=feats[fit_mask].copy() if retain_fit else None,
        fit_labels=labels[fit_mask].copy() if retain_fit else None,
    )
    return scorer


def score_batch(
    scorer: FittedScorer, feats: np.ndarray, logits: np.ndarray
) -> np.ndarray:
    """Scores for a batch; pure function of (scorer, features, logits)."""
    feats = np.asarray(feats, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if feats.ndim != 2 or logits.ndim != 2 or feats.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"features {feats.shape} and logits {logits.shape} do not align"
        )
    method = scorer.config.method
    t = scorer.config.temperature
    if method == "msp":
        return _softmax(logits).max(axis=1)
    if method == "mls":
        return logits.max(axis=1)
    if method == "energy":
        return t * _logsumexp(logits / t)
    if method == "tsoftmax":
        return _softmax(logits / t).max(axis=1)
    if method == "mds":
        if scorer.class_means is None or scorer.precision_factor is None:
            raise StateError("mds scorer has no fitted statistics")
        if feats.shape[1] != scorer.class_means.shape[1]:
            raise ShapeError("feature width does not match fitted class means")
        dists = np.empty((feats.shape[0], scorer.class_means.shape[0]))
        for i, mean in enumerate(scorer.class_means):
            y = (feats - mean) @ scorer.precision_factor
            dists[:, i] = np.sqrt(np.maximum((y * y).sum(axis=1), 0.0))
        return -dists.min(axis=1)
    if method == "vim":
        if scorer.principal_basis is None or scorer.center is None:
            raise StateError("vim scorer has no fitted statistics")
        if feats.shape[1] != scorer.center.shape[0]:
            raise ShapeError("feature width does not match fitted center")
        centered = feats - scorer.center
        residual = centered - (centered @ scorer.principal_basis) @ scorer.principal_basis.T
        res = np.sqrt((residual**2).sum(axis=1))
        return logits.max(axis=1) - scorer.alpha * res
    if method == "knn":
        if scorer.train_features is None:
            raise StateError("knn scorer has no fitted statistics")
        if feats.shape[1] != scorer.train_features.shape[1]:
            raise ShapeError("feature width does not match knn bank")
        xh = _normalize_rows(feats)
        diff = xh[:, None, :] - scorer.train_features[None, :, :]
        dist = np.sqrt(np.einsum("mnd,mnd->mn", diff, diff))
        k = min(scorer.config.knn_k, scorer.train_features.shape[0])
        kth = np.partition(dist, k - 1, axis=1)[:, k - 1]
        return -kth
    raise ArgumentError(f"unknown method {method!r}")


def score(scorer: FittedScorer, feature: np.ndarray, logits: np.ndarray) -> float:
    """Score one (feature, logits) pair; higher = more in-distribution."""
    f = np.asarray(feature, dtype=np.float64).reshape(1, -1)
    z = np.asarray(logits, dtype=np.float64).reshape(1, -1)
    return float(score_batch(scorer, f, z)[0])


def calibrate_threshold(scorer: FittedScorer, target_tpr: float) -> FittedScorer:
    """Return a copy with threshold = largest tau keeping val TPR >= target."""
    if scorer.id_val_scores.size == 0:
        raise StateError("cannot calibrate: no validation scores")
    if not (0.0 < target_tpr <= 1.0):
        raise ArgumentError(f"target_tpr must be in (0, 1], got {target_tpr}")
    tau = threshold_for_tpr(scorer.id_val_scores, target_tpr)
    return dataclasses.replace(scorer, threshold=tau, target_tpr=target_tpr)


def split_by_threshold(
    scores: np.ndarray, tau: float
) -> tuple[np.ndarray, np.ndarray]:
    """Partition indices: score >= tau counts as ID; both lists ascending."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    idx = np.arange(s.size)
    mask = s >= tau
    return idx[mask], idx[~mask]


# ---------------------------------------------------------------------------
# Session refits
# ---------------------------------------------------------------------------

def extend_scorer(
    scorer: FittedScorer,
    new_class_ids: np.ndarray,
    new_means: np.ndarray,
    new_feats: Optional[np.ndarray] = None,
) -> FittedScorer:
    """Default per-session refit: original statistics plus new class means.

    Covariance, subspace and alpha stay untouched (noise containment);
    the knn bank grows with the new samples when provided.
    """
    updates: dict = {}
    if scorer.config.method == "mds" and new_means.size:
        updates["class_ids"] = np.concatenate(
            [scorer.class_ids, np.asarray(new_class_ids, dtype=np.int64)]
        )
        updates["class_means"] = np.concatenate(
            [scorer.class_means, np.asarray(new_means, dtype=np.float64)], axis=0
        )
    if scorer.config.method == "knn" and new_feats is not None and new_feats.size:
        updates["train_features"] = np.concatenate(
            [scorer.train_features, _normalize_rows(np.asarray(new_feats, dtype=np.float64))],
            axis=0,
        )
    return dataclasses.replace(scorer, **updates) if updates else scorer


def refit_full(
    scorer: FittedScorer,
    new_feats: np.ndarray,
    new_labels: np.ndarray,
    classifier,
) -> FittedScorer:
    """Full refit: recompute all statistics from retained fit data + new data.

    Requires the scorer to have been fitted with retain_fit=True. Calibration
    (threshold, val scores) is kept from the base fit.
    """
    if scorer.fit_features is None or scorer.fit_labels is None:
        raise StateError("full refit needs a scorer fitted with retain_fit=True")
    feats = np.concatenate([scorer.fit_features, np.asarray(new_feats, dtype=np.float64)])
    labels = np.concatenate([scorer.fit_labels, np.asarray(new_labels, dtype=np.int64)])
    stats = _fit_stats(scorer.config, feats, labels, classifier)
    return dataclasses.replace(
        scorer, fit_features=feats, fit_labels=labels, **stats
    )


# ---------------------------------------------------------------------------
# Serialization helpers (consumed by store)
# ---------------------------------------------------------------------------

def scorer_blocks(scorer: FittedScorer) -> tuple[dict[str, np.ndarray], dict]:
    blocks: dict[str, np.ndarray] = {"id_val_scores": scorer.id_val_scores}
    for name in (
        "class_ids",
        "class_means",
        "precision_factor",
        "principal_basis",
        "center",
        "train_features",
        "fit_features",
        "fit_labels",
    ):
        value = getattr(scorer, name)
        if value is not None:
            blocks[name] = value
    cfg = scorer.config
    meta = {
        "method": cfg.method,
        "temperature": cfg.temperature,
        "vim_variance_target": cfg.vim_variance_target,
        "vim_dim_override": cfg.vim_dim_override,
        "knn_k": cfg.knn_k,
        "shrinkage_scale": cfg.shrinkage_scale,
        "alpha": scorer.alpha,
        "threshold": scorer.threshold,
        "target_tpr": scorer.target_tpr,
    }
    return blocks, meta


def scorer_from_blocks(meta: dict, blocks: dict[str, np.ndarray]) -> FittedScorer:
    config = ScorerConfig(
        method=meta["method"],
        temperature=meta["temperature"],
        vim_variance_target=meta["vim_variance_target"],
        vim_dim_override=meta["vim_dim_override"],
        knn_k=meta["knn_k"],
        shrinkage_scale=meta["shrinkage_scale"],
    )
    return FittedScorer(
        config=config,
        class_ids=blocks.get("class_ids"),
        class_means=blocks.get("class_means"),
        precision_factor=blocks.get("precision_factor"),
        principal_basis=blocks.get("principal_basis"),
        center=blocks.get("center"),
        alpha=meta.get("alpha"),
        train_features=blocks.get("train_features"),
        id_val_scores=blocks["id_val_scores"],
        threshold=meta.get("threshold"),
        target_tpr=meta.get("target_tpr"),
        fit_features=blocks.get("fit_features"),
        fit_labels=blocks.get("fit_labels"),
    )
