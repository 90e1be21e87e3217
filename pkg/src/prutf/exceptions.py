"""Error types raised across the package."""


class PrutfError(Exception):
    """Base class for package errors."""


class InputError(PrutfError, ValueError):
    """Malformed or inconsistent user input."""


class DimensionError(InputError):
    """Array sizes do not agree with the declared problem size."""


class PartitionError(InputError):
    """Segments do not form a valid partition of ``1..n``."""


class NumericalError(PrutfError, ArithmeticError):
    """A numerical routine could not deliver a trustworthy answer."""


class ConditioningError(NumericalError):
    """A linear system is too ill-conditioned to solve reliably."""


class PathError(NumericalError):
    """The dual path could not be continued consistently."""


class InversionError(NumericalError):
    """Confidence-interval inversion failed to bracket a root."""
