"""Exception hierarchy shared by all pvlu modules."""


class PvluError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PvluError):
    """Operand shapes are invalid or incompatible."""


class ContractError(PvluError):
    """An argument violates an operation's precondition."""


class StateError(PvluError):
    """Operation called in an invalid state (e.g. backward before forward)."""


class NumericError(PvluError):
    """A computation produced NaN/Inf or diverged."""


class FormatError(PvluError):
    """A file does not conform to its binary format."""


class BuildError(PvluError):
    """A layer stack cannot be assembled into a shape-consistent model."""


class ConfigError(PvluError):
    """An experiment configuration file is invalid."""
