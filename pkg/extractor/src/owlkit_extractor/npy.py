"""Minimal NPY v1.0 writer for the engine's file contract.

Deliberately self-contained: the component boundary with the engine is the
byte format (little-endian f32 matrices, i64 vectors, C-order), not a shared
library.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_MAGIC = b"\x93NUMPY"
_DESCR = {np.dtype(np.float32): "<f4", np.dtype(np.int64): "<i8"}


def write_npy(path: str | Path, arr: np.ndarray) -> None:
    descr = _DESCR.get(arr.dtype)
    if descr is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr)
    header = "{'descr': '%s', 'fortran_order': False, 'shape': %s, }" % (
        descr,
        repr(arr.shape),
    )
    total = len(_MAGIC) + 2 + 2 + len(header) + 1
    pad = (64 - total % 64) % 64
    header_bytes = (header + " " * pad + "\n").encode("latin1")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(b"\x01\x00")
        fh.write(struct.pack("<H", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(arr.tobytes(order="C"))
