"""Exception hierarchy shared across the package."""


class SohdiffError(Exception):
    """Base class for all package-specific errors."""


class ParseError(SohdiffError, ValueError):
    """A data file could not be parsed (names the offending line)."""


class SchemaError(SohdiffError, ValueError):
    """A data file violates the canonical schema (duplicates, bad header)."""


class ValidationError(SohdiffError, ValueError):
    """A domain object violates one of its invariants."""


class DegenerateCellError(ValidationError):
    """A cell whose first-cycle capacity makes scaling impossible."""


class InsufficientHistoryError(ValidationError):
    """A cell has fewer early-life cycles than the capacity matrix needs."""


class ParameterError(SohdiffError, ValueError):
    """Arguments outside the documented valid range."""


class ConfigurationError(SohdiffError, ValueError):
    """Inconsistent configuration (model/schedule/grid mismatch)."""


class ShapeError(SohdiffError, ValueError):
    """Array arguments with incompatible shapes."""


class NumericError(SohdiffError, ArithmeticError):
    """Non-finite values or diverging optimization."""


class CheckpointError(SohdiffError):
    """Base class for checkpoint I/O failures."""


class CorruptionError(CheckpointError):
    """Checkpoint bytes fail checksum or truncation checks."""


class IncompatibilityError(CheckpointError):
    """Checkpoint is well-formed but does not match the expected format/shape."""
