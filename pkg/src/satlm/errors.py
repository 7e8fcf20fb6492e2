"""Exception types shared across the package."""


class SatlmError(Exception):
    """Base class for all package errors."""


class CapacityError(SatlmError):
    """An exact oracle was asked to enumerate beyond its configured cap."""


class DecodeError(SatlmError):
    """A bit string does not start with a valid formula encoding."""


class IncompleteCode(DecodeError):
    """The bits run out before a formula encoding is complete.

    Distinct from a plain :class:`DecodeError`: more bits might still
    complete a valid encoding.
    """


class DimacsParseError(SatlmError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at token {position})")
        self.position = position


class UndefinedConditional(SatlmError):
    """Local probability requested for a prefix with zero mass."""


class UndefinedKL(SatlmError):
    """KL divergence is infinite because supports do not match."""


class TrainingError(SatlmError):
    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
