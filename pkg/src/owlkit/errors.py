"""Exception taxonomy shared by all owlkit modules.

The CLI maps these onto exit codes: ConfigError/ArgumentError -> 2,
DataError/FormatError/StateError and OS-level I/O -> 3, NumericError -> 4.
"""


class OwlkitError(Exception):
    """Base class for all owlkit errors."""


class FormatError(OwlkitError):
    """A binary container (NPY header, state file) is malformed."""


class DataError(OwlkitError):
    """Input data violates a contract: non-finite values, inconsistent
    shapes between files, missing labels, empty classes."""


class ArgumentError(OwlkitError, ValueError):
    """A call was made with invalid arguments."""


class ShapeError(ArgumentError):
    """Array dimensions do not match what the operation requires."""


class NumericError(OwlkitError):
    """A numeric procedure failed (singular matrix, non-convergence)."""


class StateError(OwlkitError):
    """Pipeline state does not support the requested operation."""


class StateVersionError(StateError):
    """A persisted state directory is missing or has the wrong version."""


class ConfigError(OwlkitError):
    """A configuration file or CLI flag combination is invalid."""
