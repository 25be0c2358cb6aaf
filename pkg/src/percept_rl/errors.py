"""Exception types shared across the package.

Every exception carries a human-readable message naming the violated
contract; the CLI maps them onto nonzero exit codes.
"""


class PerceptRlError(Exception):
    """Base class for all package errors."""


class DomainError(PerceptRlError, ValueError):
    """An input value is outside the mathematical domain of an operation."""


class ShapeError(PerceptRlError, ValueError):
    """Array or sequence shapes do not line up."""


class InvalidGroupError(PerceptRlError, ValueError):
    """A rollout group violates a structural precondition (e.g. too small)."""


class ConstraintError(PerceptRlError, ValueError):
    """A group or batch violates an algorithm-level side condition."""


class ValidationError(PerceptRlError, ValueError):
    """A configuration value violates a documented invariant."""


class UnsupportedError(PerceptRlError, ValueError):
    """The operation is not applicable to this input (missing metadata etc.)."""


class NumericError(PerceptRlError, ArithmeticError):
    """A non-finite value appeared mid-computation; message names the term."""


class CheckpointError(PerceptRlError, RuntimeError):
    """A checkpoint file failed to load or does not match the architecture."""


class SchemaError(PerceptRlError, KeyError):
    """A dotted config path does not exist in the configuration schema."""


class NotFoundError(PerceptRlError, FileNotFoundError):
    """A required run artifact (metrics, manifest) is missing."""
