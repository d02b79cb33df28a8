"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible (broadcast, channel or extent mismatch)."""


class DomainError(ValueError):
    """Input values outside an operation's mathematical domain."""


class ContractViolation(RuntimeError):
    """A documented precondition was violated by the caller."""


class FormatError(ValueError):
    """A file (checkpoint, PPM/PGM) does not match its documented layout."""
