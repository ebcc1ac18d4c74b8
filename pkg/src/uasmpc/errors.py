class DomainError(ValueError):
    """An input lies outside the domain an operation is defined on."""


class NumericError(ArithmeticError):
    """A computation produced or met a numerically unusable quantity."""
