"""Exception taxonomy shared across the package.

The split matters for the command line tools, which map data problems and
numeric failures to distinct exit codes.
"""


class FsdtError(Exception):
    """Base class for all package errors."""


class DimensionError(FsdtError, ValueError):
    """Tensor shapes do not satisfy an operation's requirements."""


class ContractError(FsdtError, ValueError):
    """An API precondition was violated by the caller."""


class DataError(FsdtError, ValueError):
    """Bad corpus data: manifests, vocabularies, ids, transcripts."""


class FormatError(DataError):
    """Malformed binary container or structured file."""


class NumericError(FsdtError, ArithmeticError):
    """Non-finite losses or other numeric breakdowns."""


class UnreachableAlignmentError(NumericError):
    """An alignment restriction left no path through the loss lattice."""


class UsageError(FsdtError):
    """Bad command line invocation."""
