"""owlkit: open-world learning over pre-extracted feature embeddings.

Detect unknown-class samples with post-hoc OOD scorers, partition them into
provisional novel classes by clustering, extend an incremental classifier,
and evaluate over all seen classes across an unbounded session sequence.
"""

from . import cil, metrics, ncd, ood, owl, rng, store, synth
from .errors import (
    ArgumentError,
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    OwlkitError,
    ShapeError,
    StateError,
    StateVersionError,
)

__version__ = "0.1.0"

__all__ = [
    "cil",
    "metrics",
    "ncd",
    "ood",
    "owl",
    "rng",
    "store",
    "synth",
    "ArgumentError",
    "ConfigError",
    "DataError",
    "FormatError",
    "NumericError",
    "OwlkitError",
    "ShapeError",
    "StateError",
    "StateVersionError",
    "__version__",
]
