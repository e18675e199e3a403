"""Open-world session orchestration.

One run is: learn base classes, then for every incoming unlabeled session
(1) score everything with the current scorer, (2) split at the calibrated
threshold, (3) cluster the unknown-flagged samples into provisional classes,
(4) register them and extend the head, (5) update the head per the chosen
strategy, (6) refit scorer statistics, (7) evaluate on a labeled test set
covering all classes seen so far.

Ground-truth labels riding along with unlabeled session data are quarantined:
they feed detection/clustering diagnostics in the session log and nothing
else. Discovered classes get fresh engine ids; evaluation matches them to
ground-truth ids with a Hungarian assignment on the test set, identity-mapping
base classes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import cil, metrics, ncd, ood, rng
from .errors import ArgumentError, DataError, StateError
from .store import ClassRegistry, EmbeddingSet, PipelineState

_NCM_STRATEGIES = ("ncm", "icarl", "fscil-proto")


@dataclass
class OwlConfig:
    scorer: ood.ScorerConfig = field(default_factory=ood.ScorerConfig)
    cil: cil.TrainConfig = field(default_factory=cil.TrainConfig)
    target_tpr: float = 0.95
    ncd_k: Optional[int] = None  # None -> estimate k per session
    include_pseudo_id: bool = False
    full_refit: bool = False
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 < self.target_tpr < 1.0):
            raise ArgumentError(f"target_tpr must be in (0, 1), got {self.target_tpr}")
        if self.ncd_k is not None and self.ncd_k < 1:
            raise ArgumentError("ncd_k must be >= 1 when given")
        self.cil.validate()


@dataclass
class SessionOutcome:
    session_index: int
    n_input: int
    n_flagged_ood: int
    discovered_k: int
    new_class_ids: list[int]
    log: dict


def _predict(state: PipelineState, feats: np.ndarray, strategy: str) -> np.ndarray:
    if strategy in _NCM_STRATEGIES:
        return cil.ncm_predict(state.classifier, feats)
    labels, _ = cil.head_predict(state.classifier, feats)
    return labels


def _match_discovered(
    registry: ClassRegistry, pred: np.ndarray, true: np.ndarray
) -> dict[int, int]:
    """Hungarian max-overlap match of discovered engine ids to truth ids.

    Base classes keep their identity mapping; candidates for discovered
    classes are the non-base labels present in the evaluation set. Unmatched
    discovered ids map to a sentinel that never equals a true label.
    """
    disc = registry.discovered_ids()
    base = set(registry.base_ids())
    mapping = {d: -1000 - d for d in disc}
    if not disc:
        return {}
    candidates = sorted(set(true.tolist()) - base)
    if not candidates:
        return mapping
    size = max(len(disc), len(candidates))
    overlap = np.zeros((size, size), dtype=np.float64)
    for i, d in enumerate(disc):
        sel = pred == d
        for j, c in enumerate(candidates):
            overlap[i, j] = np.sum(sel & (true == c))
    assignment, _ = ncd.hungarian(-overlap)
    for i, d in enumerate(disc):
        j = int(assignment[i])
        if j < len(candidates) and overlap[i, j] > 0:
            mapping[d] = candidates[j]
    return mapping


def evaluate(
    state: PipelineState,
    eval_test: EmbeddingSet,
    cfg: OwlConfig,
    extras: Optional[dict] = None,
    detector: Optional[tuple] = None,
) -> dict:
    """Score + classify a labeled test set and append a session log.

    ID Acc: fraction of samples from classes known before this session that
    are accepted (score >= tau) and correctly classified. OOD Acc: fraction
    of samples from classes unknown before this session that are rejected.
    Accept/reject uses the (classifier, scorer) detector snapshot when given
    (the pre-refit pair that made this session's split; the refit scorer
    would trivially accept just-learned classes). Session accuracy:
    classification accuracy over all seen classes after Hungarian-matching
    discovered ids to ground-truth ids, identity-mapping base classes.
    """
    if eval_test.labels is None:
        raise DataError("evaluation set must be labeled")
    det_clf, det_scorer = detector if detector is not None else (
        state.classifier,
        state.scorer,
    )
    if det_scorer.threshold is None:
        raise StateError("scorer has no calibrated threshold")
    session_index = len(state.session_logs)
    feats = eval_test.features.astype(np.float64)
    true = eval_test.labels
    scores = ood.score_batch(det_scorer, feats, det_clf.logits(feats))
    accepted = scores >= det_scorer.threshold
    pred = _predict(state, feats, cfg.cil.strategy)

    mapping = _match_discovered(state.registry, pred, true)
    mapped = pred.copy()
    for engine_id, true_id in mapping.items():
        mapped[pred == engine_id] = true_id

    session_acc = float(np.mean(mapped == true))
    known_before = set(state.registry.base_ids())
    novel_now: set[int] = set()
    for entry in state.registry.entries:
        if not entry.discovered:
            continue
        target = mapping.get(entry.class_id)
        if target is None or target < 0:
            continue
        if entry.origin_session < session_index:
            known_before.add(target)
        else:
            novel_now.add(target)

    id_mask = np.isin(true, sorted(known_before))
    correct = mapped == true
    id_acc = float(np.mean(accepted[id_mask] & correct[id_mask])) if id_mask.any() else None
    ood_mask = ~id_mask
    ood_acc = float(np.mean(~accepted[ood_mask])) if ood_mask.any() else None
    novel_mask = np.isin(true, sorted(novel_now))
    novel_acc = float(np.mean(correct[novel_mask])) if novel_mask.any() else None

    prior = [log["session_acc"] for log in state.session_logs]
    avg_acc = metrics.avg_accuracy(prior + [session_acc])

    log = {
        "session_index": session_index,
        "n_test": int(eval_test.n),
        "id_acc": id_acc,
        "ood_acc": ood_acc,
        "session_acc": session_acc,
        "avg_acc": avg_acc,
        "novel_acc": novel_acc,
        "n_classes": len(state.registry),
        "n_input": 0,
        "n_flagged_ood": 0,
        "discovered_k": 0,
        "new_class_ids": [],
        "detection": None,
        "ncd": None,
    }
    if extras:
        log.update(extras)
    state.eval_mapping = {d: t for d, t in mapping.items() if t >= 0}
    state.session_logs.append(log)
    return log


def run_base(
    train: EmbeddingSet, val: EmbeddingSet, cfg: OwlConfig
) -> PipelineState:
    """Base session: train the head, fit + calibrate the scorer, evaluate."""
    cfg.validate()
    if train.labels is None or val.labels is None:
        raise DataError("base train and val sets must be labeled")
    train_cfg = cil.replace_config(cfg.cil, seed=rng.key(cfg.seed, "train", 0))
    clf = cil.init_base(train, train_cfg)

    registry = ClassRegistry()
    x = train.features.astype(np.float64)
    y = train.labels
    for c in range(clf.class_count):
        registry.add(
            prototype=x[y == c].mean(axis=0),
            count=int((y == c).sum()),
            origin_session=0,
            discovered=False,
        )

    scorer = ood.fit_scorer(cfg.scorer, train, clf, retain_fit=cfg.full_refit)
    scorer = ood.calibrate_threshold(scorer, cfg.target_tpr)

    ewc_state = None
    replay = None
    if cfg.cil.strategy == "ewc":
        ewc_state = cil.compute_fisher(clf, x, y)
    elif cfg.cil.strategy == "icarl":
        replay = cil.ReplayBuffer(budget=cfg.cil.replay_budget_m)
        protos = clf.prototypes.copy()
        for c in range(clf.class_count):
            replay.add_class(c, x[y == c])
            protos[c] = replay.class_mean(c)
        clf = dataclasses.replace(clf, prototypes=protos)

    state = PipelineState(
        registry=registry,
        classifier=clf,
        scorer=scorer,
        session_logs=[],
        rng_seed=cfg.seed,
        ewc=ewc_state,
        replay=replay,
    )
    evaluate(state, val, cfg)
    return state


def _merge_small_clusters(
    assignments: np.ndarray, centroids: np.ndarray, min_size: int = 2
) -> tuple[np.ndarray, np.ndarray]:
    """Fold clusters below min_size into their nearest larger cluster."""
    assignments = assignments.copy()
    cents = {c: centroids[c].copy() for c in range(centroids.shape[0])}
    while True:
        live = sorted(cents)
        sizes = {c: int(np.sum(assignments == c)) for c in live}
        small = [c for c in live if sizes[c] < min_size]
        if not small or len(live) == 1:
            break
        c = min(small, key=lambda cc: (sizes[cc], cc))
        hosts = [h for h in live if h != c and sizes[h] >= min_size]
        if not hosts:
            hosts = [h for h in live if h != c]
        dist = {h: float(np.sum((cents[h] - cents[c]) ** 2)) for h in hosts}
        target = min(hosts, key=lambda h: (dist[h], h))
        assignments[assignments == c] = target
        del cents[c]
        # centroid positions stay pre-merge; the caller recomputes member
        # means once merging settles
    # relabel densely in ascending old-id order
    live = sorted(cents)
    remap = {old: new for new, old in enumerate(live)}
    assignments = np.asarray([remap[a] for a in assignments.tolist()], dtype=np.int64)
    return assignments, np.stack([cents[c] for c in live])


def run_open_session(
    state: PipelineState,
    unlabeled: EmbeddingSet,
    eval_test: EmbeddingSet,
    cfg: OwlConfig,
) -> tuple[PipelineState, SessionOutcome]:
    """One open-world session: score, split, discover, extend, update, evaluate."""
    cfg.validate()
    if state.scorer.threshold is None:
        raise StateError("run the base session (calibration) first")
    t = len(state.session_logs)
    detector = (state.classifier, state.scorer)
    feats = unlabeled.features.astype(np.float64)
    logits = state.classifier.logits(feats)
    scores = ood.score_batch(state.scorer, feats, logits)
    id_idx, ood_idx = ood.split_by_threshold(scores, state.scorer.threshold)

    detection = None
    gt = unlabeled.labels  # evaluation-only; never drives pipeline decisions
    if gt is not None:
        known_true = set(state.registry.base_ids()) | set(state.eval_mapping.values())
        unknown_mask = ~np.isin(gt, sorted(known_true))
        flagged = np.zeros(unlabeled.n, dtype=bool)
        flagged[ood_idx] = True
        detection = {
            "n_true_unknown": int(unknown_mask.sum()),
            "recall": float(np.mean(flagged[unknown_mask])) if unknown_mask.any() else None,
            "precision": float(np.mean(unknown_mask[flagged])) if flagged.any() else None,
        }

    old_clf = state.classifier
    clf = old_clf
    new_ids: list[int] = []
    ncd_metrics = None
    if ood_idx.size > 0:
        flagged_set = unlabeled.subset(ood_idx)
        assignments, centroids = ncd.discover(
            flagged_set, cfg.ncd_k, seed=rng.key(cfg.seed, "discover", t)
        )
        if centroids.shape[0] > 1:
            assignments, centroids = _merge_small_clusters(assignments, centroids)
        # centroids = member means after merging
        centroids = np.stack(
            [
                flagged_set.features[assignments == c].astype(np.float64).mean(axis=0)
                for c in range(int(assignments.max()) + 1)
            ]
        )
        if gt is not None:
            gt_flagged = gt[ood_idx]
            ncd_metrics = {
                "cluster_accuracy": metrics.cluster_accuracy(assignments, gt_flagged),
                "nmi": metrics.nmi(assignments, gt_flagged),
                "purity": metrics.purity(assignments, gt_flagged),
            }

        for c in range(centroids.shape[0]):
            cid = state.registry.add(
                prototype=centroids[c],
                count=int(np.sum(assignments == c)),
                origin_session=t,
                discovered=True,
            )
            new_ids.append(cid)

        clf = cil.extend_head(old_clf, len(new_ids), centroids)
        x_novel = flagged_set.features.astype(np.float64)
        y_novel = np.asarray(new_ids, dtype=np.int64)[assignments]

        x_update, y_update = x_novel, y_novel
        if cfg.include_pseudo_id and id_idx.size > 0:
            x_id = feats[id_idx]
            pseudo = _predict(state, x_id, cfg.cil.strategy)
            if state.replay is not None:
                for c in np.unique(pseudo):
                    pool = [x_id[pseudo == c]]
                    if int(c) in state.replay.exemplars:
                        pool.insert(0, state.replay.exemplars[int(c)])
                    state.replay.add_class(int(c), np.concatenate(pool, axis=0))
            else:
                x_update = np.concatenate([x_novel, x_id], axis=0)
                y_update = np.concatenate([y_novel, pseudo])

        strategy = cfg.cil.strategy
        train_cfg = cil.replace_config(cfg.cil, seed=rng.key(cfg.seed, "train", t))
        if strategy in ("ncm", "fscil-proto"):
            pass  # prototype extension only
        elif strategy == "finetune":
            clf = cil.train_linear(clf, x_update, y_update, train_cfg)
        elif strategy == "lwf":
            clf = cil.train_linear(clf, x_update, y_update, train_cfg, old_head=old_clf)
        elif strategy == "ewc":
            anchor = None
            if state.ewc is not None:
                anchor = cil.realign_ewc(
                    state.ewc, old_clf.class_count, clf.class_count, clf.dim
                )
            clf = cil.train_linear(clf, x_update, y_update, train_cfg, ewc=anchor)
            new_fisher = cil.compute_fisher(clf, x_update, y_update)
            if anchor is not None:
                new_fisher = cil.EwcState(
                    anchor.fisher_diag + new_fisher.fisher_diag, new_fisher.theta_star
                )
            state.ewc = new_fisher
        elif strategy == "icarl":
            clf = cil.train_linear(
                clf, x_update, y_update, train_cfg, old_head=old_clf, replay=state.replay
            )
            if state.replay is None:
                state.replay = cil.ReplayBuffer(budget=cfg.cil.replay_budget_m)
            protos = clf.prototypes.copy()
            for c, cid in enumerate(new_ids):
                state.replay.add_class(cid, x_novel[assignments == c])
                protos[cid] = state.replay.class_mean(cid)
            clf = dataclasses.replace(clf, prototypes=protos)
        else:
            raise ArgumentError(f"unknown strategy {strategy!r}")

        if cfg.full_refit:
            state.scorer = ood.refit_full(state.scorer, x_novel, y_novel, clf)
        else:
            state.scorer = ood.extend_scorer(
                state.scorer, np.asarray(new_ids), centroids, x_novel
            )

    state.classifier = clf
    extras = {
        "n_input": int(unlabeled.n),
        "n_flagged_ood": int(ood_idx.size),
        "discovered_k": len(new_ids),
        "new_class_ids": [int(c) for c in new_ids],
        "detection": detection,
        "ncd": ncd_metrics,
    }
    log = evaluate(state, eval_test, cfg, extras=extras, detector=detector)
    outcome = SessionOutcome(
        session_index=t,
        n_input=int(unlabeled.n),
        n_flagged_ood=int(ood_idx.size),
        discovered_k=len(new_ids),
        new_class_ids=[int(c) for c in new_ids],
        log=log,
    )
    return state, outcome
