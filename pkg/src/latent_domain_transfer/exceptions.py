"""
Exception hierarchy for the latent domain transfer package.

Every error raised by the package derives from TransferError and from the
builtin exception a caller would naturally catch, so existing
``except ValueError`` style handlers keep working.
"""


class TransferError(Exception):
    """Base class for all package errors."""


class ShapeError(TransferError, ValueError):
    """Operand shapes are incompatible with an operation."""


class NumericalError(TransferError, ArithmeticError):
    """An operation produced or received a non-finite or out-of-domain value."""


class DivergenceError(NumericalError):
    """A training loss became non-finite."""


class GraphError(TransferError, RuntimeError):
    """The differentiation graph is missing or misused."""


class GradientError(TransferError, RuntimeError):
    """A parameter is missing the gradient an update needs."""


class FormatError(TransferError, ValueError):
    """A binary file (IDX, checkpoint) does not match its format."""


class ConfigError(TransferError, ValueError):
    """A configuration file or value is invalid."""


class MissingPrerequisiteError(TransferError, FileNotFoundError):
    """A stage was started before the artifacts it depends on exist."""


class DataError(TransferError, ValueError):
    """A dataset lacks the classes or images an operation needs."""
