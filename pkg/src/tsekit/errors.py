"""Exception hierarchy shared across the engine.

The CLI maps these onto exit codes: usage problems exit 2, data problems
exit 3, numeric failures exit 4.
"""


class EngineError(Exception):
    """Base class for all errors raised by tsekit."""


class ShapeError(EngineError):
    """Incompatible tensor/array shapes for an operation."""


class DataError(EngineError):
    """Malformed or inconsistent external data (files, manifests, configs)."""


class NumericError(EngineError):
    """Numeric failure: NaN loss, failed gradient check, and the like."""
