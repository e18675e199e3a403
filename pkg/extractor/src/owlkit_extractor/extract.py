"""Walk a class-subfolder image tree and emit engine-consumable files.

Output layout under --out:
    <split>/features.npy   N x d little-endian f32
    <split>/labels.npy     N   little-endian i64 (class = sorted folder index)
    <split>/skipped.txt    only when unreadable files were skipped
    manifest.json          merged across calls; schema matches the engine

Ordering is a pure function of file paths (lexicographic), so reruns are
byte-identical regardless of filesystem enumeration order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .backbones import Backbone
from .npy import write_npy

log = logging.getLogger("owlkit_extractor")

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tiff", ".webp"}
ROLES = ("base-train", "base-val", "session-train", "session-test")


@dataclass
class ExtractResult:
    n_images: int
    dim: int
    classes: list[str]
    skipped: list[str]
    feature_path: str
    label_path: str


def list_images(images_dir: Path) -> list[tuple[Path, int, str]]:
    """(path, class index, class name) triples, lexicographically ordered."""
    classes = sorted(p.name for p in images_dir.iterdir() if p.is_dir())
    if not classes:
        raise FileNotFoundError(f"{images_dir}: no class subfolders")
    out = []
    for idx, cls in enumerate(classes):
        files = sorted(
            p for p in (images_dir / cls).rglob("*")
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        out.extend((p, idx, cls) for p in files)
    return out


def run_extract(
    images_dir: Path,
    backbone: Backbone,
    out_dir: Path,
    split: str,
    session_index: int | None = None,
    normalize: bool = False,
    batch_size: int = 32,
    dataset: str | None = None,
) -> ExtractResult:
    if split not in ROLES:
        raise ValueError(f"split must be one of {ROLES}, got {split!r}")
    if session_index is None:
        session_index = 0 if split.startswith("base-") else 1

    entries = list_images(images_dir)
    classes = sorted({cls for _, _, cls in entries})

    loaded: list[tuple[Image.Image, int]] = []
    skipped: list[str] = []
    for path, label, _ in entries:
        try:
            with Image.open(path) as img:
                loaded.append((img.convert("RGB"), label))
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            skipped.append(f"{path}\t{exc}")
    if not loaded:
        raise FileNotFoundError(f"{images_dir}: no readable images")

    feats = []
    for start in range(0, len(loaded), batch_size):
        batch = [img for img, _ in loaded[start : start + batch_size]]
        feats.append(backbone.embed(batch))
    features = np.concatenate(feats, axis=0).astype(np.float32)
    if normalize:
        norms = np.linalg.norm(features, axis=1, keepdims=True)
        features = (features / np.maximum(norms, 1e-12)).astype(np.float32)
    labels = np.asarray([label for _, label in loaded], dtype=np.int64)

    split_dir = out_dir / split
    split_dir.mkdir(parents=True, exist_ok=True)
    write_npy(split_dir / "features.npy", features)
    write_npy(split_dir / "labels.npy", labels)
    if skipped:
        (split_dir / "skipped.txt").write_text("\n".join(skipped) + "\n")

    _merge_manifest(
        out_dir,
        dataset=dataset or images_dir.name,
        dim=int(features.shape[1]),
        entry={
            "session_index": session_index,
            "role": split,
            "feature_path": f"{split}/features.npy",
            "label_path": f"{split}/labels.npy",
            "labeled": split != "session-train",
        },
    )
    return ExtractResult(
        n_images=int(features.shape[0]),
        dim=int(features.shape[1]),
        classes=classes,
        skipped=skipped,
        feature_path=str(split_dir / "features.npy"),
        label_path=str(split_dir / "labels.npy"),
    )


def _merge_manifest(out_dir: Path, dataset: str, dim: int, entry: dict) -> None:
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists():
        doc = json.loads(manifest_path.read_text())
        if doc["dim"] != dim:
            raise ValueError(
                f"manifest dim {doc['dim']} != extracted dim {dim}; use one backbone per output dir"
            )
    else:
        doc = {"dataset": dataset, "dim": dim, "sessions": []}
    doc["sessions"] = [
        s for s in doc["sessions"]
        if not (s["role"] == entry["role"] and s["session_index"] == entry["session_index"])
    ]
    doc["sessions"].append(entry)
    doc["sessions"].sort(key=lambda s: (s["session_index"], s["role"]))
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n")
