"""Exception hierarchy shared by every module."""


class I2VLabError(Exception):
    pass


class DimensionError(I2VLabError, ValueError):
    pass


class ConfigurationError(I2VLabError, ValueError):
    pass


class NumericError(I2VLabError, ArithmeticError):
    pass


class StepIndexError(I2VLabError, IndexError):
    pass


class TrainingError(I2VLabError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class StructuralError(I2VLabError, ValueError):
    pass


class FreezeViolation(I2VLabError, RuntimeError):
    """A gradient reached a parameter of the frozen partition."""
