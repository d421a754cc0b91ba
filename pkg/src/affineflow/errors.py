"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    """A physical or numerical parameter is outside its admissible range."""


class ConfigError(ValueError):
    """A run configuration file is malformed or inconsistent."""


class DegenerateFlowError(RuntimeError):
    """A flow map lost invertibility (non-positive determinant)."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class IntegrationError(RuntimeError):
    """Time integration failed; carries the last good state if available."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class EigenPathError(RuntimeError):
    """Eigenvalue continuation along a matrix path broke down (near-crossing)."""
