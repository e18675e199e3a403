"""Deterministic synthetic open-world scenarios (Gaussian mixtures).

Class centers sit on a scaled integer lattice, so any two centers are at
least `separation * sigma` apart by construction. All draws come from the
keyed counter streams in owlkit.rng (Box-Muller over a fixed 64-bit stream),
which makes generated files bit-identical for a given seed on any platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .errors import ArgumentError
from .store import EmbeddingSet, Manifest, SessionManifest, save_embeddings, save_manifest

_LATTICE_CAP = 4096


@dataclass
class SessionSpec:
    novel_classes: int
    known_fraction: float
    samples_per_class: int

    def validate(self) -> None:
        if self.novel_classes < 0 or self.samples_per_class < 1:
            raise ArgumentError("novel_classes >= 0 and samples_per_class >= 1 required")
        if not (0.0 <= self.known_fraction <= 1.0):
            raise ArgumentError("known_fraction must be in [0, 1]")
        if self.known_fraction == 1.0 and self.novel_classes > 0:
            raise ArgumentError("known_fraction=1 is only valid with no novel classes")


@dataclass
class ScenarioSpec:
    dim: int
    base_classes: int
    sessions: list[SessionSpec]
    separation: float = 8.0
    sigma: float = 1.0
    samples_per_class: int = 100  # base-session train/val/test size per class
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 1:
            raise ArgumentError("dim must be >= 1")
        if self.base_classes < 2:
            raise ArgumentError("base_classes must be >= 2")
        if self.separation <= 0:
            raise ArgumentError("separation must be > 0")
        if self.sigma < 0:
            raise ArgumentError("sigma must be >= 0")
        if self.samples_per_class < 1:
            raise ArgumentError("samples_per_class must be >= 1")
        for s in self.sessions:
            s.validate()

    @property
    def total_classes(self) -> int:
        return self.base_classes + sum(s.novel_classes for s in self.sessions)


@dataclass
class GroundTruth:
    centers: np.ndarray  # total_classes x dim
    base_ids: list[int]
    session_novel_ids: list[list[int]] = field(default_factory=list)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _lattice_centers(spec: ScenarioSpec) -> np.ndarray:
    total = spec.total_classes
    side = 2
    while side**spec.dim < 4 * total:
        side += 1
        if side > _LATTICE_CAP:
            raise ArgumentError(
                f"{total} classes exceed the lattice capacity for dim={spec.dim}"
            )
    spacing = spec.separation * (spec.sigma if spec.sigma > 0 else 1.0)
    n_points = side**spec.dim
    chosen: list[int] = []
    seen: set[int] = set()
    k = rng.key(spec.seed, "centers")
    counter = 0
    while len(chosen) < total:
        idx = int(rng.raw64(k, counter)) % n_points
        counter += 1
        if idx in seen:
            continue
        seen.add(idx)
        chosen.append(idx)
    coords = np.zeros((total, spec.dim), dtype=np.float64)
    for row, idx in enumerate(chosen):
        for axis in range(spec.dim):
            coords[row, axis] = idx % side
            idx //= side
    return coords * spacing


def _draw_class(
    spec: ScenarioSpec, centers: np.ndarray, cid: int, n: int, tag: tuple
) -> np.ndarray:
    z = rng.normals(rng.key(spec.seed, "cls", cid, *tag), n * spec.dim)
    return centers[cid] + spec.sigma * z.reshape(n, spec.dim)


def _stack_classes(
    spec: ScenarioSpec, centers: np.ndarray, class_ids: list[int], n_each: int, tag: tuple
) -> tuple[np.ndarray, np.ndarray]:
    xs = [_draw_class(spec, centers, cid, n_each, tag) for cid in class_ids]
    ys = [np.full(n_each, cid, dtype=np.int64) for cid in class_ids]
    return np.concatenate(xs, axis=0), np.concatenate(ys)


def generate(spec: ScenarioSpec, out_dir: str | Path) -> tuple[Manifest, GroundTruth]:
    """Write a full scenario (NPY files + manifest.json) under out_dir.

    Session-train files keep their ground-truth label file on disk but are
    marked labeled=false: the pipeline may use those labels only for
    evaluation diagnostics.
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    centers = _lattice_centers(spec)
    base_ids = list(range(spec.base_classes))
    truth = GroundTruth(centers=centers, base_ids=base_ids)

    sessions: list[SessionManifest] = []

    def _write(name: str, feats: np.ndarray, labels: np.ndarray) -> tuple[str, str]:
        es = EmbeddingSet(feats.astype(np.float32), labels)
        save_embeddings(es, out / f"{name}.npy", out / f"{name}.labels.npy")
        return f"{name}.npy", f"{name}.labels.npy"

    for role, tag in (("base-train", ("train",)), ("base-val", ("val",))):
        x, y = _stack_classes(spec, centers, base_ids, spec.samples_per_class, tag)
        fp, lp = _write(role.replace("-", "_"), x, y)
        sessions.append(
            SessionManifest(0, role, fp, lp, labeled=True)
        )

    known_pool = list(base_ids)
    next_class = spec.base_classes
    for t, sess in enumerate(spec.sessions, start=1):
        novel_ids = list(range(next_class, next_class + sess.novel_classes))
        next_class += sess.novel_classes
        truth.session_novel_ids.append(novel_ids)

        n_novel = sess.novel_classes * sess.samples_per_class
        if n_novel > 0:
            kappa = sess.known_fraction
            cand = round_half_up(kappa / (1.0 - kappa) * n_novel) if kappa < 1.0 else 0
            n_known = cand
            for delta in (0, 1, -1, 2, -2):
                trial = max(cand + delta, 0)
                if round_half_up(kappa * (n_novel + trial)) == trial:
                    n_known = trial
                    break
        else:
            n_known = sess.samples_per_class * len(known_pool) if sess.known_fraction > 0 else 0

        parts_x, parts_y = [], []
        if n_novel > 0:
            x, y = _stack_classes(
                spec, centers, novel_ids, sess.samples_per_class, ("sess-novel", t)
            )
            parts_x.append(x)
            parts_y.append(y)
        if n_known > 0:
            picks = rng.raw64(
                rng.key(spec.seed, "mix", t), np.arange(n_known, dtype=np.uint64)
            )
            cls = np.asarray(known_pool, dtype=np.int64)[
                (picks % np.uint64(len(known_pool))).astype(np.int64)
            ]
            z = rng.normals(rng.key(spec.seed, "sess-known", t), n_known * spec.dim)
            parts_x.append(centers[cls] + spec.sigma * z.reshape(n_known, spec.dim))
            parts_y.append(cls)
        x_train = np.concatenate(parts_x, axis=0)
        y_train = np.concatenate(parts_y)
        perm = rng.permutation(rng.key(spec.seed, "shuffle-train", t), x_train.shape[0])
        fp, lp = _write(f"session_{t}_train", x_train[perm], y_train[perm])
        sessions.append(SessionManifest(t, "session-train", fp, lp, labeled=False))

        seen = known_pool + novel_ids
        x_test, y_test = _stack_classes(
            spec, centers, seen, sess.samples_per_class, ("test", t)
        )
        fp, lp = _write(f"session_{t}_test", x_test, y_test)
        sessions.append(SessionManifest(t, "session-test", fp, lp, labeled=True))
        known_pool = seen

    manifest = Manifest(dataset="synth", dim=spec.dim, sessions=sessions)
    save_manifest(manifest, out / "manifest.json")
    return manifest, truth
