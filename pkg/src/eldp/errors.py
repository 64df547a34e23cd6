"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain where an operation is defined."""


class DimensionError(ValueError):
    """Inputs have incompatible sizes."""


class AssignmentError(KeyError):
    """An item has no cluster under the partition in use."""


class NumericError(ArithmeticError):
    """A numerical routine failed to reach its accuracy target."""


class QuadratureError(NumericError):
    pass


class InstabilityError(NumericError):
    pass


class ConfigError(ValueError):
    """Invalid experiment or CLI configuration."""
