"""Exception types shared across the package."""


class EvfError(Exception):
    """Base class for all library errors."""


class ShapeError(EvfError):
    """Operand shapes are incompatible with an operation's contract."""


class ContractError(EvfError):
    """A documented precondition was violated by the caller."""


class NumericError(EvfError):
    """Non-finite values appeared where finite ones are required."""


class ConfigError(EvfError):
    """A configuration value is invalid; the message names the field."""


class FixtureError(EvfError):
    """An input fixture file could not be parsed or fails its schema."""


class UnstableInstanceError(EvfError):
    """A finite-difference perturbation flipped a discrete token allocation."""
