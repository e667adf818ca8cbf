"""Numerical toolkit for the circle action near a parabolic orbit."""

from .errors import ConfigError, CuspLabError, NumericalError, ValidationError
from .exprlang import ScalarExpr, parse
from .model import ParabolicModel, classify, cubic_roots, default_model

__all__ = [
    "ConfigError",
    "CuspLabError",
    "NumericalError",
    "ParabolicModel",
    "ScalarExpr",
    "ValidationError",
    "classify",
    "cubic_roots",
    "default_model",
    "parse",
]

__version__ = "0.1.0"
