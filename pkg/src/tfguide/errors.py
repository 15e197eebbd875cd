"""Exception types shared across the package."""


class TFGuideError(Exception):
    """Base class."""


class ConfigError(TFGuideError, ValueError):
    """Invalid configuration or argument value."""


class InputError(TFGuideError, ValueError):
    """Input array has the wrong shape or dimension."""


class SingularTimeError(TFGuideError, ValueError):
    """Posterior quantity requested at a time with alpha_t = 0."""


class OrderingError(TFGuideError, ValueError):
    """Time indices given in the wrong order."""


class CapabilityError(TFGuideError, NotImplementedError):
    """Requested combination of method, loss, and dimension is not supported."""


class InsufficientDataError(TFGuideError, ValueError):
    """Too few samples or steps for the requested statistic."""


class NumericalError(TFGuideError, FloatingPointError):
    """A NaN or overflow occurred; ``diagnostics`` holds the context."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
