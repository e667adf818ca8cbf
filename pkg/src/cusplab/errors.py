"""Exception hierarchy shared across the package."""


class CuspLabError(Exception):
    """Base class for all package errors."""


class ConfigError(CuspLabError):
    """Bad user input: config file, grid spec or argument."""


class ValidationError(CuspLabError):
    """A map or model failed a verification check."""

    def __init__(self, message, defects=None):
        super().__init__(message)
        self.defects = dict(defects or {})


class NumericalError(CuspLabError):
    """Integration, quadrature or root-finding failure."""
