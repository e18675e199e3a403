#!/usr/bin/env python3
"""Compare head-update strategies on one synthetic open-world scenario.

Runs every strategy over the same generated data and prints final and
average accuracy plus detection quality, one row per strategy. Useful as a
desk-scale analogue of the usual strategy-comparison curves.

Usage: python scripts/sweep_strategies.py [--seed 42] [--sessions 3]
"""

import argparse
import tempfile
from pathlib import Path

from owlkit import cil, ood, owl, store, synth


def run_strategy(mpath, manifest, strategy, scorer, seed, sessions):
    cfg = owl.OwlConfig(
        scorer=ood.ScorerConfig(method=scorer),
        cil=cil.TrainConfig(strategy=strategy, epochs=20, seed=0),
        target_tpr=0.99,
        seed=seed,
    )
    train = store.resolve_set(mpath, manifest.entries("base-train", 0)[0])
    val = store.resolve_set(mpath, manifest.entries("base-val", 0)[0])
    state = owl.run_base(train, val, cfg)
    for t in range(1, sessions + 1):
        unl = store.resolve_set(mpath, manifest.entries("session-train", t)[0])
        test = store.resolve_set(mpath, manifest.entries("session-test", t)[0])
        state, _ = owl.run_open_session(state, unl, test, cfg)
    return state


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--sessions", type=int, default=3)
    ap.add_argument("--scorer", default="mds", choices=list(ood.METHODS))
    args = ap.parse_args()

    out = Path(tempfile.mkdtemp(prefix="owl-sweep-"))
    spec = synth.ScenarioSpec(
        dim=16,
        base_classes=5,
        sessions=[synth.SessionSpec(2, 0.5, 80)] * args.sessions,
        separation=8.0,
        sigma=1.0,
        samples_per_class=80,
        seed=args.seed,
    )
    manifest, _ = synth.generate(spec, out)
    mpath = out / "manifest.json"

    print(f"{'strategy':<12} {'last_acc':>8} {'avg_acc':>8} {'classes':>7}")
    print("-" * 40)
    for strategy in cil.STRATEGIES:
        state = run_strategy(mpath, manifest, strategy, args.scorer, args.seed, args.sessions)
        last = state.session_logs[-1]
        print(
            f"{strategy:<12} {100 * last['session_acc']:>7.2f}% "
            f"{100 * last['avg_acc']:>7.2f}% {last['n_classes']:>7}"
        )


if __name__ == "__main__":
    main()
