"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A caller-supplied value or shape violates an operation's contract."""


class InvalidMode(ValueError):
    """An operation was asked to run in a mode it does not support."""


class EmptyProfile(ValueError):
    """A statistic was requested over an empty set of steps."""


class NumericFault(ArithmeticError):
    """A non-finite value appeared in an activation.

    ``where`` names the layer or scan step that produced it.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class ParseError(ValueError):
    """Malformed binary input; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
