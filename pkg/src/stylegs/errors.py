class ParameterError(ValueError):
    """Invalid argument value or inconsistent input shapes."""


class FormatError(ValueError):
    """Malformed on-disk data (PLY header, weight blob, config file)."""


class DivergenceError(RuntimeError):
    """Raised when an optimization step produces non-finite values."""

    def __init__(self, message, step=None, group=None):
        super().__init__(message)
        self.step = step
        self.group = group
