"""Exception hierarchy shared by every module."""


class VrnnError(Exception):
    """Base class for all library errors."""


class DimensionError(VrnnError, ValueError):
    """Incompatible tensor shapes or out-of-range axes/bounds."""


class DomainError(VrnnError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ContractError(VrnnError, ValueError):
    """A precondition of an operation was violated."""


class FormatError(VrnnError, ValueError):
    """Malformed file or byte stream.

    ``offset`` is the byte offset (binary formats) or line number (text
    formats) where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(VrnnError, ArithmeticError):
    """Non-finite value encountered during training or evaluation."""
