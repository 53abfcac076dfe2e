"""Exception types shared across the package."""


class PolarqError(Exception):
    """Base class for all package-specific errors."""


class DomainError(PolarqError, ValueError):
    """A numeric parameter lies outside its mathematical domain."""


class PreconditionError(PolarqError, ValueError):
    """A documented precondition of an operation does not hold."""


class TruncationError(PolarqError):
    """The truncated lattice window captures too little probability mass.

    Signals that the number of partition levels r is too small for the
    requested sigma/eta ratio.
    """


class EmptyCosetError(PolarqError):
    """A conditioning coset carries zero probability mass on the window."""


class SizeError(PolarqError, ValueError):
    """A block length is not a power of two (or is otherwise malformed)."""


class InfeasibleRateError(PolarqError):
    """No index-set threshold attains the requested code rate."""


class VersionError(PolarqError):
    """A serialized artifact declares an unsupported schema version."""


class HashError(PolarqError):
    """A serialized artifact fails its content-hash integrity check."""
