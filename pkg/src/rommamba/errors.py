class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""


class ContractError(ValueError):
    """A call violated an operation's precondition."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where finite values are required."""
