"""Exception types shared across the package."""


class AdddError(Exception):
    """Base class for package errors."""


class ShapeError(AdddError, ValueError):
    """Array or sequence dimensions do not match what an operation expects."""


class InvalidInputError(AdddError, ValueError):
    """Input data is empty, too short or otherwise unusable."""


class ConfigError(AdddError, ValueError):
    """A configuration value is out of its allowed range."""


class NumericError(AdddError, ArithmeticError):
    """Non-finite values were encountered."""


class ContractError(AdddError, RuntimeError):
    """An operation was called in a state that violates its precondition."""


class TopologyError(AdddError, ValueError):
    """A topology file or graph is malformed."""


class ProtocolError(AdddError, ValueError):
    """A runtime envelope violates the wire protocol."""
