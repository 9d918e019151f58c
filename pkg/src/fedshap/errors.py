"""Exception hierarchy shared across the package.

Plain ``ValueError`` is used for ordinary argument validation; the classes
here exist so the CLI can map failure families to distinct exit codes.
"""


class FedshapError(Exception):
    """Base class for package-specific failures."""


class FormatError(FedshapError):
    """A file does not conform to its declared format (IDX magic, CSV cell, ...)."""


class CapacityError(FedshapError):
    """A requested computation exceeds a configured size cap."""


class SplitInfeasibleError(FedshapError):
    """The requested split scheme cannot be satisfied by the dataset's class counts."""


class NumericError(FedshapError):
    """Non-finite values or an undefined numeric result (e.g. zero-norm cosine)."""
