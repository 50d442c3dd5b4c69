"""Exception types shared across the package."""


class VirnetError(Exception):
    """Base class for all package errors."""


class DomainError(VirnetError, ValueError):
    """An argument lies outside the domain of a function."""


class ShapeError(VirnetError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ContractError(VirnetError, ValueError):
    """A precondition of an operation does not hold."""


class ConditioningError(VirnetError, ArithmeticError):
    """A linear system is rank deficient or too badly conditioned to solve."""

    def __init__(self, message, singular_values=None):
        super().__init__(message)
        self.singular_values = singular_values


class NumericalFailure(VirnetError, RuntimeError):
    """Training produced a non-finite value."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
