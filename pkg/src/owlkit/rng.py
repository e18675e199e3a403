"""Counter-based deterministic random streams.

Every random decision in owlkit is drawn from a keyed SplitMix64 stream:
output(i) = finalize(key + (i + 1) * GOLDEN mod 2^64), where finalize is the
SplitMix64 mixing function. Draws depend only on (key, counter), never on
call order or array layout, so datasets, shuffles and k-means++ seeds are
bit-reproducible across platforms and row permutations.

Keys are derived by folding arbitrary integer/string labels into a 64-bit
value with the same mixer, e.g. ``key(seed, "kpp", round_idx)``.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# float in [0,1) from the top 53 bits of a u64
_INV53 = float(2.0**-53)


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int (mod 2^64)."""
    z &= 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * _MIX1) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * _MIX2) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def key(*parts: int | str) -> int:
    """Fold seed and stream labels into a 64-bit stream key.

    Strings are hashed bytewise through the same mixer so labels like
    "kpp" or "shuffle" give distinct, platform-independent keys.
    """
    k = 0
    for part in parts:
        if isinstance(part, str):
            for b in part.encode("utf-8"):
                k = mix64(k * 0x100000001B3 + b + _GOLDEN)
        else:
            k = mix64((k + int(part) + _GOLDEN))
    return k


def raw64(stream_key: int, counters: np.ndarray | int) -> np.ndarray:
    """u64 outputs of the keyed stream at the given counter positions."""
    ctr = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (np.uint64(stream_key) + (ctr + np.uint64(1)) * np.uint64(_GOLDEN)) & _MASK
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
    return z


def uniform(stream_key: int, counters: np.ndarray | int) -> np.ndarray:
    """f64 in [0, 1), one per counter."""
    return (raw64(stream_key, counters) >> np.uint64(11)).astype(np.float64) * _INV53


def uniform_open(stream_key: int, counters: np.ndarray | int) -> np.ndarray:
    """f64 in (0, 1), safe as a log argument."""
    bits = (raw64(stream_key, counters) >> np.uint64(11)).astype(np.float64)
    return (bits + 0.5) * _INV53


def normals(stream_key: int, n: int, offset: int = 0) -> np.ndarray:
    """n standard normals via Box-Muller on counters [offset, offset + n).

    Each normal consumes two u64 draws at counters (2t, 2t+1) so parallel
    generators can carve up the stream by sample index.
    """
    if n == 0:
        return np.zeros(0, dtype=np.float64)
    t = np.arange(offset, offset + n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        u1 = uniform_open(stream_key, t * np.uint64(2))
        u2 = uniform(stream_key, t * np.uint64(2) + np.uint64(1))
    r = np.sqrt(-2.0 * np.log(u1))
    return r * np.cos(2.0 * np.pi * u2)


def permutation(stream_key: int, n: int) -> np.ndarray:
    """Deterministic permutation of range(n): argsort of per-index hashes."""
    h = raw64(stream_key, np.arange(n, dtype=np.uint64))
    return np.argsort(h, kind="stable")
