"""Incremental classifier heads and update strategies.

The feature extractor is frozen upstream, so every strategy here acts on the
head alone: plain fine-tuning, LwF distillation from the previous head, EWC
anchoring on a Fisher diagonal, iCaRL-style herding replay, and pure
prototype extension for few-shot sessions.

Optimization is plain SGD without momentum; epoch shuffles come from a
counter-based stream keyed by (seed, epoch), which makes whole training
trajectories bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import rng
from .errors import ArgumentError, DataError, ShapeError
from .store import EmbeddingSet

_EPS = 1e-12

HEAD_KINDS = ("linear", "cosine")
STRATEGIES = ("ncm", "finetune", "lwf", "ewc", "icarl", "fscil-proto")


@dataclass
class TrainConfig:
    strategy: str = "finetune"
    epochs: int = 50
    lr: float = 0.01
    weight_decay: float = 5e-4
    batch_size: int = 64
    lambda_lwf: float = 1.0
    kd_temperature: float = 2.0
    lambda_ewc: float = 100.0
    replay_budget_m: int = 20
    head_kind: str = "linear"
    cosine_scale: float = 16.0
    seed: int = 0

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ArgumentError(f"unknown strategy {self.strategy!r}")
        if self.head_kind not in HEAD_KINDS:
            raise ArgumentError(f"unknown head kind {self.head_kind!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.replay_budget_m < 1:
            raise ArgumentError("epochs, batch_size, replay_budget_m must be >= 1")
        if self.lr <= 0 or self.kd_temperature <= 0 or self.cosine_scale <= 0:
            raise ArgumentError("lr, kd_temperature, cosine_scale must be > 0")
        if self.weight_decay < 0 or self.lambda_lwf < 0 or self.lambda_ewc < 0:
            raise ArgumentError("weight_decay and penalty weights must be >= 0")


@dataclass
class IncrementalClassifier:
    weights: np.ndarray  # C x d
    bias: np.ndarray  # C
    prototypes: np.ndarray  # C x d class means
    head_kind: str = "linear"
    cosine_scale: float = 16.0
    loss_trace: Optional[list[float]] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        c = self.weights.shape[0]
        if self.bias.shape != (c,) or self.prototypes.shape[0] != c:
            raise ShapeError("weights, bias and prototypes disagree on class count")
        if self.head_kind not in HEAD_KINDS:
            raise ArgumentError(f"unknown head kind {self.head_kind!r}")

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"expected (*, {self.dim}) features, got {x.shape}")
        if self.head_kind == "linear":
            return x @ self.weights.T + self.bias
        xh = _normalize_rows(x)
        wh = _normalize_rows(self.weights)
        return self.cosine_scale * (xh @ wh.T)

    def copy(self) -> "IncrementalClassifier":
        return IncrementalClassifier(
            self.weights.copy(),
            self.bias.copy(),
            self.prototypes.copy(),
            self.head_kind,
            self.cosine_scale,
        )


@dataclass
class EwcState:
    fisher_diag: np.ndarray
    theta_star: np.ndarray

    def __post_init__(self) -> None:
        self.fisher_diag = np.asarray(self.fisher_diag, dtype=np.float64).ravel()
        self.theta_star = np.asarray(self.theta_star, dtype=np.float64).ravel()
        if self.fisher_diag.shape != self.theta_star.shape:
            raise ShapeError("fisher_diag and theta_star must have equal length")
        if (self.fisher_diag < 0).any():
            raise DataError("fisher_diag must be elementwise non-negative")


@dataclass
class ReplayBuffer:
    budget: int
    exemplars: dict[int, np.ndarray] = field(default_factory=dict)

    def add_class(self, class_id: int, feats: np.ndarray) -> None:
        feats = np.asarray(feats, dtype=np.float64)
        m = min(self.budget, feats.shape[0])
        picked = herding_select(feats, m)
        self.exemplars[int(class_id)] = feats[picked].copy()

    def dataset(self) -> tuple[np.ndarray, np.ndarray]:
        cids = sorted(self.exemplars)
        xs = [self.exemplars[c] for c in cids]
        ys = [np.full(self.exemplars[c].shape[0], c, dtype=np.int64) for c in cids]
        if not cids:
            raise DataError("replay buffer is empty")
        return np.concatenate(xs, axis=0), np.concatenate(ys)

    def class_mean(self, class_id: int) -> np.ndarray:
        return self.exemplars[int(class_id)].mean(axis=0)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, _EPS)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Parameter vector <-> head
# ---------------------------------------------------------------------------

def flatten_params(weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return np.concatenate([weights.ravel(), bias])


def unflatten_params(theta: np.ndarray, c: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    return theta[: c * d].reshape(c, d), theta[c * d :]


def _pad_ewc(ewc: EwcState, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Grow an anchored parameter vector with unpenalized zeros.

    After extend_head the head has more parameters than the anchor; the old
    (W, b) layout is preserved block-wise, so re-embed the old entries at
    their new flat offsets.
    """
    n_old = ewc.fisher_diag.size
    if n_old == size:
        return ewc.fisher_diag, ewc.theta_star
    if n_old > size:
        raise ShapeError("EWC state is larger than the current parameter vector")
    raise ShapeError(
        "EWC state layout mismatch: realign with realign_ewc before training"
    )


def realign_ewc(ewc: EwcState, c_old: int, c_new: int, d: int) -> EwcState:
    """Re-embed an anchor computed at c_old classes into a c_new-class layout."""
    if ewc.fisher_diag.size != c_old * d + c_old:
        raise ShapeError("EWC state does not match the stated old layout")
    fisher = np.zeros(c_new * d + c_new)
    theta = np.zeros(c_new * d + c_new)
    f_w, f_b = unflatten_params(ewc.fisher_diag, c_old, d)
    t_w, t_b = unflatten_params(ewc.theta_star, c_old, d)
    fisher[: c_old * d] = f_w.ravel()
    fisher[c_new * d : c_new * d + c_old] = f_b
    theta[: c_old * d] = t_w.ravel()
    theta[c_new * d : c_new * d + c_old] = t_b
    return EwcState(fisher, theta)


# ---------------------------------------------------------------------------
# Loss and gradient
# ---------------------------------------------------------------------------

def loss_and_grad(
    theta: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    head_kind: str,
    cosine_scale: float,
    c: int,
    d: int,
    weight_decay: float = 0.0,
    old_logits: Optional[np.ndarray] = None,
    lambda_lwf: float = 0.0,
    kd_temperature: float = 2.0,
    ewc: Optional[EwcState] = None,
    lambda_ewc: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Total loss and exact gradient for one batch.

    loss = CE + lambda_lwf * T^2 * KL(old || new on old classes)
         + (lambda_ewc / 2) * sum F (theta - theta*)^2
         + (weight_decay / 2) * |theta|^2
    The KD and EWC terms are skipped entirely when their weight is 0, so a
    zero-weight run is arithmetically identical to plain fine-tuning.
    """
    b = x.shape[0]
    w, bias = unflatten_params(theta, c, d)

    if head_kind == "linear":
        z = x @ w.T + bias
    else:
        xh = _normalize_rows(x)
        w_norms = np.sqrt((w * w).sum(axis=1, keepdims=True))
        wh = w / np.maximum(w_norms, _EPS)
        cos = xh @ wh.T
        z = cosine_scale * cos

    logp = _log_softmax(z)
    loss = float(-np.mean(logp[np.arange(b), y]))
    gz = np.exp(logp)
    gz[np.arange(b), y] -= 1.0
    gz /= b

    if old_logits is not None and lambda_lwf > 0.0:
        t = kd_temperature
        c_old = old_logits.shape[1]
        logq = _log_softmax(old_logits / t)
        logs = _log_softmax(z[:, :c_old] / t)
        q = np.exp(logq)
        kl = np.sum(q * (logq - logs), axis=1)
        loss += lambda_lwf * t * t * float(np.mean(kl))
        gz[:, :c_old] += lambda_lwf * t * (np.exp(logs) - q) / b

    if head_kind == "linear":
        g_w = gz.T @ x
        g_b = gz.sum(axis=0)
    else:
        # d z_bc / d w_c = s / |w_c| * (xh_b - cos_bc * wh_c)
        gz_s = cosine_scale * gz
        g_dir = gz_s.T @ xh
        q_c = (gz_s * cos).sum(axis=0)
        g_w = (g_dir - q_c[:, None] * wh) / np.maximum(w_norms, _EPS)
        g_b = np.zeros(c)

    grad = flatten_params(g_w, g_b)

    if ewc is not None and lambda_ewc > 0.0:
        fisher, theta_star = _pad_ewc(ewc, theta.size)
        diff = theta - theta_star
        loss += 0.5 * lambda_ewc * float(np.sum(fisher * diff * diff))
        grad += lambda_ewc * fisher * diff

    if weight_decay > 0.0:
        loss += 0.5 * weight_decay * float(np.sum(theta * theta))
        grad += weight_decay * theta

    return loss, grad


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_linear(
    clf: IncrementalClassifier,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    old_head: Optional[IncrementalClassifier] = None,
    ewc: Optional[EwcState] = None,
    replay: Optional[ReplayBuffer] = None,
) -> IncrementalClassifier:
    """Mini-batch SGD on the head; returns a new classifier.

    old_head enables the distillation term, ewc the quadratic anchor, replay
    merges stored exemplars into the training set. Deterministic given
    cfg.seed.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ArgumentError("training data must be a non-empty matrix")
    if x.shape[0] != y.shape[0]:
        raise ShapeError("X and y row counts differ")
    if replay is not None and replay.exemplars:
        rx, ry = replay.dataset()
        x = np.concatenate([x, rx], axis=0)
        y = np.concatenate([y, ry])
    c, d = clf.class_count, clf.dim
    if x.shape[1] != d:
        raise ShapeError(f"features have width {x.shape[1]}, head expects {d}")
    if y.min() < 0 or y.max() >= c:
        raise ArgumentError(f"labels outside [0, {c})")

    use_kd = old_head is not None and cfg.lambda_lwf > 0.0
    old_logits_full = old_head.logits(x) if use_kd else None

    theta = flatten_params(clf.weights, clf.bias)
    n = x.shape[0]
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(rng.key(cfg.seed, "shuffle", epoch), n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, grad = loss_and_grad(
                theta,
                x[idx],
                y[idx],
                clf.head_kind,
                clf.cosine_scale,
                c,
                d,
                weight_decay=cfg.weight_decay,
                old_logits=None if old_logits_full is None else old_logits_full[idx],
                lambda_lwf=cfg.lambda_lwf if use_kd else 0.0,
                kd_temperature=cfg.kd_temperature,
                ewc=ewc,
                lambda_ewc=cfg.lambda_ewc if ewc is not None else 0.0,
            )
            theta = theta - cfg.lr * grad
            if clf.head_kind == "cosine":
                w, bias = unflatten_params(theta, c, d)
                theta = flatten_params(_normalize_rows(w), bias)
            epoch_loss += loss * idx.size
        trace.append(epoch_loss / n)

    w, bias = unflatten_params(theta, c, d)
    out = IncrementalClassifier(
        w.copy(), bias.copy(), clf.prototypes.copy(), clf.head_kind, clf.cosine_scale
    )
    out.loss_trace = trace
    return out


def init_base(train: EmbeddingSet, cfg: TrainConfig) -> IncrementalClassifier:
    """Base-session head: per-class mean prototypes + SGD-trained head."""
    cfg.validate()
    if train.labels is None:
        raise DataError("base training set must be labeled")
    x = train.features.astype(np.float64)
    y = train.labels
    classes = np.unique(y)
    c0 = classes.size
    if not np.array_equal(classes, np.arange(c0)):
        raise DataError(f"base labels must be dense in [0, C0), got {classes}")
    protos = np.stack([x[y == cls].mean(axis=0) for cls in range(c0)])
    w0 = _normalize_rows(protos) if cfg.head_kind == "cosine" else protos.copy()
    clf = IncrementalClassifier(
        w0, np.zeros(c0), protos, cfg.head_kind, cfg.cosine_scale
    )
    return train_linear(clf, x, y, cfg)


def extend_head(
    clf: IncrementalClassifier, new_class_count: int, init_prototypes: np.ndarray
) -> IncrementalClassifier:
    """Append rows for new classes; old rows stay bit-identical."""
    if new_class_count < 0:
        raise ArgumentError("new_class_count must be >= 0")
    if new_class_count == 0:
        return clf.copy()
    protos = np.asarray(init_prototypes, dtype=np.float64)
    if protos.shape != (new_class_count, clf.dim):
        raise ShapeError(
            f"init_prototypes must be ({new_class_count}, {clf.dim}), got {protos.shape}"
        )
    new_rows = _normalize_rows(protos) if clf.head_kind == "cosine" else protos
    return IncrementalClassifier(
        np.concatenate([clf.weights, new_rows], axis=0),
        np.concatenate([clf.bias, np.zeros(new_class_count)]),
        np.concatenate([clf.prototypes, protos], axis=0),
        clf.head_kind,
        clf.cosine_scale,
    )


def herding_select(x_class: np.ndarray, m: int) -> np.ndarray:
    """Greedy herding: keep the running exemplar mean close to the class mean.

    Operates on L2-normalized features; returns an ordered index list.
    """
    x = np.asarray(x_class, dtype=np.float64)
    n = x.shape[0]
    if not (1 <= m <= n):
        raise ArgumentError(f"need 1 <= m <= n, got m={m}, n={n}")
    xh = _normalize_rows(x)
    mu = xh.mean(axis=0)
    selected: list[int] = []
    running = np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    for t in range(1, m + 1):
        cand_means = (running[None, :] + xh) / t
        cost = np.sqrt(((mu[None, :] - cand_means) ** 2).sum(axis=1))
        cost[~available] = np.inf
        pick = int(np.argmin(cost))
        selected.append(pick)
        available[pick] = False
        running = running + xh[pick]
    return np.asarray(selected, dtype=np.int64)


def ncm_predict(clf: IncrementalClassifier, x: np.ndarray) -> np.ndarray:
    """Nearest prototype on L2-normalized features; ties to smallest id."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != clf.dim:
        raise ShapeError(f"expected (*, {clf.dim}) features, got {x.shape}")
    xh = _normalize_rows(x)
    ph = _normalize_rows(clf.prototypes)
    diff = xh[:, None, :] - ph[None, :, :]
    d2 = np.einsum("mcd,mcd->mc", diff, diff)
    return np.argmin(d2, axis=1).astype(np.int64)


def head_predict(
    clf: IncrementalClassifier, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    logits = clf.logits(x)
    return np.argmax(logits, axis=1).astype(np.int64), logits


def fscil_update(
    clf: IncrementalClassifier, shots: EmbeddingSet, k_shots: int
) -> IncrementalClassifier:
    """Prototype-only extension from an N-way K-shot session (no gradients)."""
    if shots.labels is None:
        raise DataError("few-shot session must be labeled")
    if k_shots < 1:
        raise ArgumentError("K must be >= 1")
    y = shots.labels
    classes = np.unique(y)
    c = clf.class_count
    if not np.array_equal(classes, np.arange(c, c + classes.size)):
        raise DataError(
            f"novel classes must continue densely from {c}, got {classes}"
        )
    counts = np.array([(y == cls).sum() for cls in classes])
    if not (counts == k_shots).all():
        raise DataError(f"every class needs exactly {k_shots} shots, got {counts}")
    x = shots.features.astype(np.float64)
    protos = np.stack([x[y == cls].mean(axis=0) for cls in classes])
    return extend_head(clf, classes.size, protos)


def compute_fisher(
    clf: IncrementalClassifier, x: np.ndarray, y: np.ndarray
) -> EwcState:
    """Empirical Fisher diagonal: mean squared per-sample log-lik gradient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ArgumentError("fisher needs at least one labeled sample")
    if x.shape[0] != y.shape[0]:
        raise ShapeError("X and y row counts differ")
    c, d = clf.class_count, clf.dim
    n = x.shape[0]
    logits = clf.logits(x)
    p = _softmax(logits)
    gz = -p
    gz[np.arange(n), y] += 1.0  # d log p(y|x) / d z

    if clf.head_kind == "linear":
        f_w = (gz**2).T @ (x**2) / n
        f_b = (gz**2).mean(axis=0)
    else:
        xh = _normalize_rows(x)
        w_norms = np.sqrt((clf.weights**2).sum(axis=1, keepdims=True))
        wh = clf.weights / np.maximum(w_norms, _EPS)
        cos = xh @ wh.T
        scale = clf.cosine_scale / np.maximum(w_norms[:, 0], _EPS)
        per = (
            gz[:, :, None]
            * scale[None, :, None]
            * (xh[:, None, :] - cos[:, :, None] * wh[None, :, :])
        )
        f_w = (per**2).mean(axis=0)
        f_b = np.zeros(c)

    fisher = flatten_params(f_w, f_b)
    theta_star = flatten_params(clf.weights, clf.bias)
    return EwcState(fisher, theta_star)


# ---------------------------------------------------------------------------
# Serialization helpers (consumed by store)
# ---------------------------------------------------------------------------

def classifier_blocks(clf: IncrementalClassifier) -> dict[str, np.ndarray]:
    return {
        "weights": clf.weights.astype(np.float64),
        "bias": clf.bias.astype(np.float64),
        "prototypes": clf.prototypes.astype(np.float64),
    }


def classifier_meta(clf: IncrementalClassifier) -> dict:
    return {
        "head_kind": clf.head_kind,
        "cosine_scale": clf.cosine_scale,
        "class_count": clf.class_count,
    }


def classifier_from_blocks(meta: dict, blocks: dict[str, np.ndarray]) -> IncrementalClassifier:
    return IncrementalClassifier(
        blocks["weights"],
        blocks["bias"],
        blocks["prototypes"],
        meta["head_kind"],
        meta["cosine_scale"],
    )


def replay_blocks(buf: ReplayBuffer) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cids = sorted(buf.exemplars)
    classes = np.asarray(cids, dtype=np.int64)
    counts = np.asarray([buf.exemplars[c].shape[0] for c in cids], dtype=np.int64)
    if cids:
        feats = np.concatenate([buf.exemplars[c] for c in cids], axis=0)
    else:
        feats = np.zeros((0, 1), dtype=np.float64)
    return classes, counts, feats.astype(np.float64)


def replay_from_blocks(
    budget: int, classes: np.ndarray, counts: np.ndarray, feats: np.ndarray
) -> ReplayBuffer:
    buf = ReplayBuffer(budget=int(budget))
    offset = 0
    for cid, cnt in zip(classes.tolist(), counts.tolist()):
        buf.exemplars[int(cid)] = feats[offset : offset + cnt].copy()
        offset += cnt
    return buf


def replace_config(cfg: TrainConfig, **kwargs) -> TrainConfig:
    return replace(cfg, **kwargs)
