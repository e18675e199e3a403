"""Command-line surface. Exit codes: 0 ok, 2 config/usage, 3 data/IO, 4 numeric.

Subcommands: synth, fit-base, owl-run, ood-eval, cil-run, fscil-run,
ncd-eval, report. Logging level comes from OWLKIT_LOG (error|warn|info|debug).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import cil, metrics, ncd, ood, owl, store, synth
from .config import load_config, override_seed
from .errors import (
    ArgumentError,
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    OwlkitError,
    StateError,
)

log = logging.getLogger("owlkit")

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def _setup_logging() -> None:
    level = _LOG_LEVELS.get(os.environ.get("OWLKIT_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _pct(x: float | None) -> str:
    return "" if x is None else f"{metrics.round_half_up(100.0 * x):.2f}"


def _load_entry(
    manifest_path: Path, manifest: store.Manifest, role: str, session_index: int
) -> store.EmbeddingSet:
    entries = manifest.entries(role, session_index)
    if not entries:
        raise DataError(f"manifest has no {role} entry for session {session_index}")
    return store.resolve_set(manifest_path, entries[0])


def _read_manifest(path: str) -> tuple[Path, store.Manifest]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"manifest not found: {p}")
    return p, store.load_manifest(p)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    spec = cfg["synth"]
    if spec is None:
        raise ConfigError("config has no [synth] section")
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=int(args.seed))
    manifest, _ = synth.generate(spec, args.out)
    print(f"wrote {len(manifest.sessions)} manifest entries under {args.out}")
    return 0


def _base_sets(
    manifest_path: Path, manifest: store.Manifest
) -> tuple[store.EmbeddingSet, store.EmbeddingSet]:
    train = _load_entry(manifest_path, manifest, "base-train", 0)
    val_entries = manifest.entries("base-val", 0)
    if val_entries:
        val = store.resolve_set(manifest_path, val_entries[0])
    else:
        log.warning("manifest has no base-val entry; using base-train for the base log")
        val = train
    return train, val


def cmd_fit_base(args: argparse.Namespace) -> int:
    cfg = override_seed(load_config(args.config)["owl"], args.seed)
    manifest_path, manifest = _read_manifest(args.manifest)
    train, val = _base_sets(manifest_path, manifest)
    state = owl.run_base(train, val, cfg)
    store.save_state(state, args.out)
    print(
        f"base session: {len(state.registry)} classes, "
        f"threshold {state.scorer.threshold:.6g}, state -> {args.out}"
    )
    return 0


def cmd_owl_run(args: argparse.Namespace) -> int:
    cfg = override_seed(load_config(args.config)["owl"], args.seed)
    manifest_path, manifest = _read_manifest(args.manifest)
    state = store.load_state(args.state)
    done = len(state.session_logs)  # log 0 is the base session
    indices = [t for t in manifest.open_session_indices() if t >= done]
    if args.sessions is not None:
        indices = indices[: args.sessions]
    for t in indices:
        unlabeled = _load_entry(manifest_path, manifest, "session-train", t)
        eval_test = _load_entry(manifest_path, manifest, "session-test", t)
        state, outcome = owl.run_open_session(state, unlabeled, eval_test, cfg)
        print(
            f"session {t}: {outcome.n_flagged_ood}/{outcome.n_input} flagged, "
            f"discovered {outcome.discovered_k}, "
            f"acc {_pct(outcome.log['session_acc'])}, avg {_pct(outcome.log['avg_acc'])}"
        )
    store.save_state(state, args.state)
    return 0


def cmd_ood_eval(args: argparse.Namespace) -> int:
    report_cfg = {"near": [], "far": []}
    if args.config:
        report_cfg = load_config(args.config)["report"]
    state = store.load_state(args.state)
    scorer = state.scorer
    if args.method != scorer.config.method:
        if args.method not in ood.METHODS:
            raise ConfigError(f"unknown OOD method {args.method!r}")
        if args.method not in ("msp", "mls", "energy", "tsoftmax"):
            raise ConfigError(
                f"state was fitted for {scorer.config.method!r}; feature-based "
                f"method {args.method!r} needs a state fitted with it"
            )
        scorer = dataclasses.replace(scorer, config=ood.ScorerConfig(method=args.method))

    def _scores(path: str) -> np.ndarray:
        es = store.load_embeddings(path)
        feats = es.features.astype(np.float64)
        return ood.score_batch(scorer, feats, state.classifier.logits(feats))

    id_scores = _scores(args.id)
    groups: dict[str, list[float]] = {}
    rows = []
    for ood_path in args.ood:
        stem = Path(ood_path).stem
        group = (
            "near" if stem in report_cfg["near"]
            else "far" if stem in report_cfg["far"]
            else "ungrouped"
        )
        rep = metrics.detection_report(id_scores, _scores(ood_path))
        rows.append((group, stem, rep.auroc, rep.fpr_at_tpr))
        groups.setdefault(group, []).append(rep.auroc)

    out_rows = [("group", "dataset", "auroc", "fpr95")]
    for group, stem, auc, fpr in rows:
        out_rows.append((group, stem, _pct(auc), _pct(fpr)))
    for group in sorted(groups):
        out_rows.append(
            (group, "AVG", _pct(float(np.mean(groups[group]))), "")
        )
    _write_csv(args.out, out_rows)
    return 0


def _write_csv(out: str | None, rows: list[tuple]) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    else:
        csv.writer(sys.stdout).writerows(rows)


def cmd_cil_run(args: argparse.Namespace) -> int:
    """Supervised class-incremental run over labeled sessions."""
    cfg = override_seed(load_config(args.config)["owl"], args.seed)
    manifest_path, manifest = _read_manifest(args.manifest)
    train, _ = _base_sets(manifest_path, manifest)
    train_cfg = cil.replace_config(cfg.cil, seed=cfg.seed)
    clf = cil.init_base(train, train_cfg)
    ewc_state = cil.compute_fisher(
        clf, train.features.astype(np.float64), train.labels
    ) if cfg.cil.strategy == "ewc" else None
    replay = None
    if cfg.cil.strategy == "icarl":
        replay = cil.ReplayBuffer(budget=cfg.cil.replay_budget_m)
        x, y = train.features.astype(np.float64), train.labels
        for c in range(clf.class_count):
            replay.add_class(c, x[y == c])

    accs: list[float] = []
    rows = [("session_index", "n_classes", "accuracy", "avg")]

    def _eval(t: int) -> None:
        test = _load_entry(manifest_path, manifest, "session-test", t) if t > 0 else None
        if test is None:
            return
        feats = test.features.astype(np.float64)
        if cfg.cil.strategy in ("ncm", "icarl", "fscil-proto"):
            pred = cil.ncm_predict(clf, feats)
        else:
            pred, _ = cil.head_predict(clf, feats)
        acc = metrics.accuracy(pred, test.labels)
        accs.append(acc)
        rows.append((t, clf.class_count, _pct(acc), _pct(metrics.avg_accuracy(accs))))

    for t in manifest.open_session_indices():
        sess = _load_entry(manifest_path, manifest, "session-train", t)
        if sess.labels is None:
            raise DataError(f"cil-run needs labeled session-train for session {t}")
        x, y = sess.features.astype(np.float64), sess.labels
        new_classes = np.unique(y)
        expected = np.arange(clf.class_count, clf.class_count + new_classes.size)
        if not np.array_equal(new_classes, expected):
            raise DataError(
                f"session {t} labels must continue densely from {clf.class_count}"
            )
        protos = np.stack([x[y == c].mean(axis=0) for c in new_classes])
        old_clf = clf
        clf = cil.extend_head(clf, new_classes.size, protos)
        strat = cfg.cil.strategy
        sess_cfg = cil.replace_config(cfg.cil, seed=int(np.uint64(cfg.seed) + np.uint64(t)))
        if strat in ("ncm", "fscil-proto"):
            pass
        elif strat == "finetune":
            clf = cil.train_linear(clf, x, y, sess_cfg)
        elif strat == "lwf":
            clf = cil.train_linear(clf, x, y, sess_cfg, old_head=old_clf)
        elif strat == "ewc":
            anchor = cil.realign_ewc(ewc_state, old_clf.class_count, clf.class_count, clf.dim)
            clf = cil.train_linear(clf, x, y, sess_cfg, ewc=anchor)
            new_f = cil.compute_fisher(clf, x, y)
            ewc_state = cil.EwcState(anchor.fisher_diag + new_f.fisher_diag, new_f.theta_star)
        elif strat == "icarl":
            clf = cil.train_linear(clf, x, y, sess_cfg, old_head=old_clf, replay=replay)
            protos_live = clf.prototypes.copy()
            for c in new_classes:
                replay.add_class(int(c), x[y == c])
                protos_live[int(c)] = replay.class_mean(int(c))
            clf = dataclasses.replace(clf, prototypes=protos_live)
        _eval(t)

    _write_csv(args.out, rows)
    return 0


def cmd_fscil_run(args: argparse.Namespace) -> int:
    cfg = override_seed(load_config(args.config)["owl"], args.seed)
    manifest_path, manifest = _read_manifest(args.manifest)
    train, _ = _base_sets(manifest_path, manifest)
    clf = cil.init_base(train, cil.replace_config(cfg.cil, seed=cfg.seed))

    accs: list[float] = []
    rows = [("session_index", "accuracy", "avg")]

    def _eval_on(t: int) -> None:
        entries = manifest.entries("session-test", t)
        if not entries:
            return
        test = store.resolve_set(manifest_path, entries[0])
        pred = cil.ncm_predict(clf, test.features.astype(np.float64))
        accs.append(metrics.accuracy(pred, test.labels))
        rows.append((t, _pct(accs[-1]), _pct(metrics.avg_accuracy(accs))))

    base_test = manifest.entries("session-test", 0)
    if base_test:
        _eval_on(0)
    for t in manifest.open_session_indices():
        shots = _load_entry(manifest_path, manifest, "session-train", t)
        if shots.labels is None:
            raise DataError(f"fscil-run needs labeled shots for session {t}")
        counts = np.unique(np.bincount(shots.labels - shots.labels.min()))
        counts = counts[counts > 0]
        if counts.size != 1:
            raise DataError(f"session {t}: uneven shot counts {counts.tolist()}")
        k_shots = int(counts[0]) if args.shots is None else args.shots
        clf = cil.fscil_update(clf, shots, k_shots)
        _eval_on(t)

    if accs:
        rows.append(("last_avg", _pct(accs[-1]), _pct(metrics.avg_accuracy(accs))))
    _write_csv(args.out, rows)
    return 0


def cmd_ncd_eval(args: argparse.Namespace) -> int:
    es = store.load_embeddings(args.features, args.labels)
    labels, centroids = ncd.discover(es, args.k, seed=args.seed or 0)
    result = {
        "k": int(centroids.shape[0]),
        "cluster_accuracy": metrics.cluster_accuracy(labels, es.labels),
        "nmi": metrics.nmi(labels, es.labels),
        "purity": metrics.purity(labels, es.labels),
    }
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    state_dir = Path(args.state)
    logs_path = state_dir / "logs.json"
    if not logs_path.exists():
        raise DataError(f"no logs.json under {state_dir}")
    logs = json.loads(logs_path.read_text())
    rows = [("session_index", "n_classes", "accuracy", "avg", "id_acc", "ood_acc")]
    plot = {"x": [], "y": []}
    for rec in logs:
        rows.append(
            (
                rec["session_index"],
                rec["n_classes"],
                _pct(rec["session_acc"]),
                _pct(rec["avg_acc"]),
                _pct(rec.get("id_acc")),
                _pct(rec.get("ood_acc")),
            )
        )
        plot["x"].append(rec["session_index"])
        plot["y"].append(metrics.round_half_up(100.0 * rec["session_acc"]))
    _write_csv(args.out_csv, rows)
    if args.out_plot:
        Path(args.out_plot).write_text(json.dumps(plot) + "\n")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="owlkit", description="Open-world learning over embedding files"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-base", help="train base classes and calibrate")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_fit_base)

    p = sub.add_parser("owl-run", help="run open-world sessions from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--sessions", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_owl_run)

    p = sub.add_parser("ood-eval", help="score ID vs OOD embedding files")
    p.add_argument("--id", required=True)
    p.add_argument("--ood", required=True, nargs="+")
    p.add_argument("--state", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ood_eval)

    p = sub.add_parser("cil-run", help="supervised class-incremental run")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_cil_run)

    p = sub.add_parser("fscil-run", help="few-shot class-incremental run")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--shots", type=int)
    p.set_defaults(func=cmd_fscil_run)

    p = sub.add_parser("ncd-eval", help="cluster an embedding file against labels")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ncd_eval)

    p = sub.add_parser("report", help="emit per-session accuracy CSV + plot data")
    p.add_argument("--state", required=True)
    p.add_argument("--out-csv")
    p.add_argument("--out-plot")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ArgumentError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, StateError, OSError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OwlkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
