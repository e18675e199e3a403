#!/usr/bin/env python3
"""Parallel seed sweep: independent pipeline processes, disjoint state dirs.

Each seed gets its own `owlkit fit-base` + `owlkit owl-run` process pair over
the same generated scenario; --jobs caps how many run concurrently. Collects
final and average accuracy per seed from each state's logs.json.

Usage: python scripts/sweep_seeds.py --seeds 1 2 3 4 [--jobs 4]
"""

import argparse
import json
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

CONFIG = """
[scorer]
method = "mds"

[cil]
strategy = "ncm"
epochs = 20

[owl]
target_tpr = 0.99

[synth]
dim = 16
base_classes = 5
separation = 8.0
sigma = 1.0
samples_per_class = 80

[[synth.sessions]]
novel_classes = 3
known_fraction = 0.5
samples_per_class = 80
"""


def run_seed(work: Path, cfg: Path, seed: int) -> tuple[int, dict]:
    data = work / f"data-{seed}"
    state = work / f"state-{seed}"

    def owlkit(*args):
        proc = subprocess.run(
            [sys.executable, "-m", "owlkit.cli", *args],
            capture_output=True, text=True,
        )
        if proc.returncode != 0:
            raise RuntimeError(f"seed {seed}: {args[0]} failed: {proc.stderr}")

    owlkit("synth", "--config", str(cfg), "--out", str(data), "--seed", str(seed))
    owlkit("fit-base", "--manifest", str(data / "manifest.json"),
           "--config", str(cfg), "--out", str(state), "--seed", str(seed))
    owlkit("owl-run", "--manifest", str(data / "manifest.json"),
           "--config", str(cfg), "--state", str(state), "--seed", str(seed))
    logs = json.loads((state / "logs.json").read_text())
    return seed, logs[-1]


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4])
    ap.add_argument("--jobs", type=int, default=4)
    args = ap.parse_args()

    work = Path(tempfile.mkdtemp(prefix="owl-seeds-"))
    cfg = work / "run.toml"
    cfg.write_text(CONFIG)

    print(f"{'seed':>5} {'final_acc':>9} {'avg_acc':>8} {'found':>5}")
    print("-" * 32)
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        for seed, last in pool.map(lambda s: run_seed(work, cfg, s), args.seeds):
            print(
                f"{seed:>5} {100 * last['session_acc']:>8.2f}% "
                f"{100 * last['avg_acc']:>7.2f}% {last['discovered_k']:>5}"
            )


if __name__ == "__main__":
    main()
