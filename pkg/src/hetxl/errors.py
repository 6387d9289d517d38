"""Exception types shared across the package."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class TrainingDiverged(NumericError):
    """Training loss became non-finite at some step."""

    def __init__(self, step: int, message: str | None = None):
        self.step = int(step)
        super().__init__(message or f"training diverged at step {self.step}")


class ConfigError(ValueError):
    """A run configuration failed validation."""


class DataError(ValueError):
    """A data or model file is malformed or inconsistent."""
