"""Variational restoration of images under non-i.i.d. noise and blur.

The numerical core (special functions, reverse-mode autodiff, conv layers)
is written on top of numpy only.
"""
from .errors import (ConditioningError, ContractError, DomainError, NumericalFailure, ShapeError,
                     VirnetError)

__version__ = "0.1.0"

__all__ = ["ConditioningError", "ContractError", "DomainError", "NumericalFailure", "ShapeError",
           "VirnetError", "__version__"]
