"""Data model and on-disk formats: NPY files, manifests, registry, state dirs.

Feature files are NPY v1.0, little-endian f32, C-order, shape (N, d); label
files are i64 of shape (N,) with -1 marking unlabeled rows. The codec here is
self-contained so the format stays pinned independently of the numpy version
(tests cross-check it against numpy's own reader/writer).

A state directory holds: state.json (metadata + version "owl-state-v1"),
classifier.npy and scorer.npy (each a concatenation of NPY blocks, block
names listed in state.json), registry.json, logs.json.
"""

from __future__ import annotations

import ast
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np

from .errors import DataError, FormatError, StateVersionError

STATE_VERSION = "owl-state-v1"

_MAGIC = b"\x93NUMPY"
_SUPPORTED_DESCR = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64}

MANIFEST_ROLES = ("base-train", "base-val", "session-train", "session-test")


# ---------------------------------------------------------------------------
# NPY v1.0 codec
# ---------------------------------------------------------------------------

def write_npy(dst: str | Path | BinaryIO, arr: np.ndarray) -> None:
    """Write one array as an NPY v1.0 block (f4, f8 or i8, C-order)."""
    descr = None
    for cand, dt in _SUPPORTED_DESCR.items():
        if arr.dtype == dt:
            descr = cand
            break
    if descr is None:
        raise FormatError(f"unsupported dtype for NPY writer: {arr.dtype}")
    arr = np.ascontiguousarray(arr)
    header = "{'descr': '%s', 'fortran_order': False, 'shape': %s, }" % (
        descr,
        repr(arr.shape),
    )
    # pad with spaces so magic+version+len+header is a multiple of 64,
    # terminated by newline (mirrors the format's alignment rule)
    base = len(_MAGIC) + 2 + 2
    total = base + len(header) + 1
    pad = (64 - total % 64) % 64
    header_bytes = (header + " " * pad + "\n").encode("latin1")

    def _emit(fh: BinaryIO) -> None:
        fh.write(_MAGIC)
        fh.write(b"\x01\x00")
        fh.write(struct.pack("<H", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(arr.tobytes(order="C"))

    if hasattr(dst, "write"):
        _emit(dst)  # type: ignore[arg-type]
    else:
        with open(dst, "wb") as fh:
            _emit(fh)


def read_npy(src: str | Path | BinaryIO) -> np.ndarray:
    """Read one NPY v1.0 block; rejects any header/payload inconsistency."""
    if hasattr(src, "read"):
        return _read_block(src)  # type: ignore[arg-type]
    with open(src, "rb") as fh:
        arr = _read_block(fh)
        if fh.read(1):
            raise FormatError(f"{src}: trailing bytes after NPY payload")
        return arr


def _read_block(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(6)
    if magic != _MAGIC:
        raise FormatError("bad NPY magic bytes")
    version = fh.read(2)
    if version != b"\x01\x00":
        raise FormatError(f"unsupported NPY version {tuple(version)}")
    raw_len = fh.read(2)
    if len(raw_len) != 2:
        raise FormatError("truncated NPY header length")
    (hlen,) = struct.unpack("<H", raw_len)
    header = fh.read(hlen)
    if len(header) != hlen:
        raise FormatError("truncated NPY header")
    try:
        meta = ast.literal_eval(header.decode("latin1").strip())
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"unparseable NPY header: {exc}") from exc
    if not isinstance(meta, dict) or set(meta) != {"descr", "fortran_order", "shape"}:
        raise FormatError(f"unexpected NPY header keys: {meta!r}")
    descr = meta["descr"]
    if descr not in _SUPPORTED_DESCR:
        raise FormatError(f"unsupported NPY descr {descr!r}")
    if meta["fortran_order"] is not False:
        raise FormatError("fortran_order arrays are not supported")
    shape = meta["shape"]
    if not (
        isinstance(shape, tuple)
        and all(isinstance(s, int) and s >= 0 for s in shape)
        and 1 <= len(shape) <= 2
    ):
        raise FormatError(f"unsupported NPY shape {shape!r}")
    dtype = np.dtype(_SUPPORTED_DESCR[descr])
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    nbytes = count * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError(
            f"payload has {len(payload)} bytes, header shape {shape} needs {nbytes}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_npy_blocks(path: str | Path, blocks: dict[str, np.ndarray]) -> list[str]:
    """Write named arrays as consecutive NPY blocks; returns the name order."""
    names = list(blocks)
    with open(path, "wb") as fh:
        for name in names:
            write_npy(fh, blocks[name])
    return names


def read_npy_blocks(path: str | Path, names: list[str]) -> dict[str, np.ndarray]:
    """Read back consecutive NPY blocks written by write_npy_blocks."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        for name in names:
            out[name] = _read_block(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after final block")
    return out


# ---------------------------------------------------------------------------
# Embedding sets
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingSet:
    """N x d f32 feature matrix with optional labels and stable sample ids.

    Arrays are frozen (writeable=False) after validation; treat values as
    immutable and share them freely across workers.
    """

    features: np.ndarray
    labels: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-d, got ndim={self.features.ndim}")
        n, d = self.features.shape
        if d < 1:
            raise DataError("feature dimension must be >= 1")
        if not np.isfinite(self.features).all():
            raise DataError("features contain NaN or Inf")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise DataError(
                    f"labels length {self.labels.shape} inconsistent with N={n}"
                )
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        else:
            self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
            if self.ids.shape != (n,):
                raise DataError(f"ids length {self.ids.shape} inconsistent with N={n}")
            if (self.ids < 0).any():
                raise DataError("ids must be non-negative")
            if np.unique(self.ids).size != n:
                raise DataError("ids must be unique within a set")
        for arr in (self.features, self.labels, self.ids):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray) -> "EmbeddingSet":
        """Row subset keeping original ids (and labels when present)."""
        labels = None if self.labels is None else self.labels[index]
        return EmbeddingSet(self.features[index], labels, self.ids[index])


def load_embeddings(
    feature_path: str | Path, label_path: str | Path | None = None
) -> EmbeddingSet:
    feats = read_npy(feature_path)
    if feats.dtype != np.float32 or feats.ndim != 2:
        raise FormatError(
            f"{feature_path}: expected f32 matrix, got {feats.dtype} ndim={feats.ndim}"
        )
    labels = None
    if label_path is not None:
        labels = read_npy(label_path)
        if labels.dtype != np.int64 or labels.ndim != 1:
            raise FormatError(
                f"{label_path}: expected i64 vector, got {labels.dtype} ndim={labels.ndim}"
            )
        if labels.shape[0] != feats.shape[0]:
            raise DataError(
                f"labels ({labels.shape[0]}) and features ({feats.shape[0]}) disagree"
            )
    return EmbeddingSet(feats, labels)


def save_embeddings(
    es: EmbeddingSet,
    feature_path: str | Path,
    label_path: str | Path | None = None,
) -> None:
    write_npy(feature_path, es.features)
    if label_path is not None:
        if es.labels is None:
            raise DataError("label_path given but the set has no labels")
        write_npy(label_path, es.labels)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass
class SessionManifest:
    session_index: int
    role: str
    feature_path: str
    label_path: Optional[str] = None
    labeled: bool = False

    def __post_init__(self) -> None:
        if self.session_index < 0:
            raise DataError("session_index must be >= 0")
        if self.role not in MANIFEST_ROLES:
            raise DataError(f"unknown manifest role {self.role!r}")
        if self.role in ("base-train", "base-val") and not self.labeled:
            raise DataError(f"{self.role} entries must be labeled")
        if self.labeled and self.label_path is None:
            raise DataError(f"{self.role}: labeled entry needs a label_path")


@dataclass
class Manifest:
    dataset: str
    dim: int
    sessions: list[SessionManifest] = field(default_factory=list)

    def entries(self, role: str, session_index: int | None = None) -> list[SessionManifest]:
        out = [s for s in self.sessions if s.role == role]
        if session_index is not None:
            out = [s for s in out if s.session_index == session_index]
        return out

    def open_session_indices(self) -> list[int]:
        return sorted({s.session_index for s in self.sessions if s.role == "session-train"})

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "dim": self.dim,
            "sessions": [
                {
                    "session_index": s.session_index,
                    "role": s.role,
                    "feature_path": s.feature_path,
                    "label_path": s.label_path,
                    "labeled": s.labeled,
                }
                for s in self.sessions
            ],
        }


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")


def load_manifest(path: str | Path) -> Manifest:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid manifest JSON: {exc}") from exc
    try:
        sessions = [SessionManifest(**s) for s in doc["sessions"]]
        return Manifest(dataset=doc["dataset"], dim=int(doc["dim"]), sessions=sessions)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: manifest schema violation: {exc}") from exc


def resolve_set(
    manifest_path: str | Path,
    entry: SessionManifest,
    with_labels: bool | None = None,
) -> EmbeddingSet:
    """Load an entry's files, resolving paths relative to the manifest."""
    root = Path(manifest_path).parent
    fpath = root / entry.feature_path
    use_labels = entry.label_path is not None if with_labels is None else with_labels
    lpath = root / entry.label_path if (use_labels and entry.label_path) else None
    return load_embeddings(fpath, lpath)


# ---------------------------------------------------------------------------
# Class registry
# ---------------------------------------------------------------------------

@dataclass
class ClassEntry:
    class_id: int
    origin_session: int
    discovered: bool
    prototype: np.ndarray
    count: int


@dataclass
class ClassRegistry:
    entries: list[ClassEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self) -> None:
        ids = [e.class_id for e in self.entries]
        if ids != list(range(len(ids))):
            raise DataError(f"class ids must be dense in [0, C), got {ids}")
        origins = [e.origin_session for e in self.entries]
        if any(b < a for a, b in zip(origins, origins[1:])):
            raise DataError("origin_session must be non-decreasing")
        for e in self.entries:
            if e.count < 1:
                raise DataError(f"class {e.class_id}: count must be >= 1")
            if not np.isfinite(e.prototype).all():
                raise DataError(f"class {e.class_id}: prototype not finite")

    def add(
        self, prototype: np.ndarray, count: int, origin_session: int, discovered: bool
    ) -> int:
        cid = len(self.entries)
        self.entries.append(
            ClassEntry(
                class_id=cid,
                origin_session=origin_session,
                discovered=discovered,
                prototype=np.asarray(prototype, dtype=np.float64).copy(),
                count=int(count),
            )
        )
        return cid

    def base_ids(self) -> list[int]:
        return [e.class_id for e in self.entries if not e.discovered]

    def discovered_ids(self) -> list[int]:
        return [e.class_id for e in self.entries if e.discovered]


# ---------------------------------------------------------------------------
# Pipeline state persistence
# ---------------------------------------------------------------------------

@dataclass
class PipelineState:
    """Everything one OWL run carries between sessions.

    classifier / scorer are the live cil.IncrementalClassifier and
    ood.FittedScorer objects; ewc / replay are optional strategy baggage
    (persisted as extra NPY blocks); eval_mapping maps discovered engine
    class ids to matched ground-truth ids from the latest evaluation.
    """

    registry: ClassRegistry
    classifier: object
    scorer: object
    session_logs: list[dict] = field(default_factory=list)
    rng_seed: int = 0
    ewc: object = None
    replay: object = None
    eval_mapping: dict[int, int] = field(default_factory=dict)

    def validate(self) -> None:
        self.registry.validate()
        if getattr(self.classifier, "class_count") != len(self.registry):
            raise DataError(
                "classifier output dimension "
                f"{getattr(self.classifier, 'class_count')} != registry size {len(self.registry)}"
            )
        idx = [log["session_index"] for log in self.session_logs]
        if idx != list(range(len(idx))):
            raise DataError(f"session logs must be gapless from 0, got {idx}")


def save_state(state: PipelineState, dir_path: str | Path) -> None:
    from . import cil, ood  # deferred: store stays import-light

    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    state.validate()

    clf_blocks = cil.classifier_blocks(state.classifier)
    clf_blocks["registry_prototypes"] = np.stack(
        [e.prototype for e in state.registry.entries]
    ).astype(np.float64)
    strategy_meta: dict = {"has_ewc": False, "has_replay": False}
    if state.ewc is not None:
        clf_blocks["ewc_fisher"] = np.asarray(state.ewc.fisher_diag, dtype=np.float64)
        clf_blocks["ewc_theta_star"] = np.asarray(state.ewc.theta_star, dtype=np.float64)
        strategy_meta["has_ewc"] = True
    if state.replay is not None:
        classes, counts, feats = cil.replay_blocks(state.replay)
        clf_blocks["replay_classes"] = classes
        clf_blocks["replay_counts"] = counts
        clf_blocks["replay_features"] = feats
        strategy_meta["has_replay"] = True
        strategy_meta["replay_budget"] = state.replay.budget

    scorer_blocks, scorer_meta = ood.scorer_blocks(state.scorer)

    meta = {
        "version": STATE_VERSION,
        "rng_seed": int(state.rng_seed),
        "classifier": {
            **cil.classifier_meta(state.classifier),
            "blocks": list(clf_blocks),
        },
        "scorer": {**scorer_meta, "blocks": list(scorer_blocks)},
        "strategy": strategy_meta,
        "eval_mapping": {str(k): int(v) for k, v in state.eval_mapping.items()},
    }
    write_npy_blocks(out / "classifier.npy", clf_blocks)
    write_npy_blocks(out / "scorer.npy", scorer_blocks)
    (out / "state.json").write_text(json.dumps(meta, indent=2) + "\n")
    registry_doc = {
        "entries": [
            {
                "class_id": e.class_id,
                "origin_session": e.origin_session,
                "discovered": e.discovered,
                "count": e.count,
            }
            for e in state.registry.entries
        ]
    }
    (out / "registry.json").write_text(json.dumps(registry_doc, indent=2) + "\n")
    (out / "logs.json").write_text(json.dumps(state.session_logs, indent=2) + "\n")


def load_state(dir_path: str | Path) -> PipelineState:
    from . import cil, ood

    root = Path(dir_path)
    state_file = root / "state.json"
    if not state_file.exists():
        raise StateVersionError(f"{root}: no state.json found")
    meta = json.loads(state_file.read_text())
    version = meta.get("version")
    if version != STATE_VERSION:
        raise StateVersionError(
            f"{root}: state version {version!r}, expected {STATE_VERSION!r}"
        )

    clf_blocks = read_npy_blocks(root / "classifier.npy", meta["classifier"]["blocks"])
    scorer_blocks = read_npy_blocks(root / "scorer.npy", meta["scorer"]["blocks"])
    classifier = cil.classifier_from_blocks(meta["classifier"], clf_blocks)
    scorer = ood.scorer_from_blocks(meta["scorer"], scorer_blocks)

    registry_doc = json.loads((root / "registry.json").read_text())
    protos = clf_blocks["registry_prototypes"]
    registry = ClassRegistry(
        [
            ClassEntry(
                class_id=e["class_id"],
                origin_session=e["origin_session"],
                discovered=e["discovered"],
                prototype=protos[i],
                count=e["count"],
            )
            for i, e in enumerate(registry_doc["entries"])
        ]
    )
    logs = json.loads((root / "logs.json").read_text())

    ewc = None
    if meta["strategy"].get("has_ewc"):
        ewc = cil.EwcState(
            fisher_diag=clf_blocks["ewc_fisher"],
            theta_star=clf_blocks["ewc_theta_star"],
        )
    replay = None
    if meta["strategy"].get("has_replay"):
        replay = cil.replay_from_blocks(
            meta["strategy"]["replay_budget"],
            clf_blocks["replay_classes"],
            clf_blocks["replay_counts"],
            clf_blocks["replay_features"],
        )

    state = PipelineState(
        registry=registry,
        classifier=classifier,
        scorer=scorer,
        session_logs=logs,
        rng_seed=meta["rng_seed"],
        ewc=ewc,
        replay=replay,
        eval_mapping={int(k): v for k, v in meta.get("eval_mapping", {}).items()},
    )
    state.validate()
    return state
