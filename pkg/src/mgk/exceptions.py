"""Exception hierarchy shared by every module."""


class MGKError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(MGKError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(MGKError, ValueError):
    """Parameters or configuration violate a documented constraint."""


class ContractError(MGKError, ValueError):
    """A caller broke an operation's precondition."""


class DegenerateRowError(MGKError, ArithmeticError):
    """A normalization row has no mass (fully masked or underflowed)."""


class EmptyInputError(MGKError, ValueError):
    """An operation received no data where at least one item is required."""


class DomainError(MGKError, ValueError):
    """An integer argument lies outside the formula's domain."""


class TrainingFailure(MGKError, RuntimeError):
    """Training diverged; ``state`` holds the last finite parameter snapshot."""

    def __init__(self, message, state=None, epoch=None):
        super().__init__(message)
        self.state = state
        self.epoch = epoch
