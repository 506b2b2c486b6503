"""Exception types shared across the package."""


class BsmpError(Exception):
    """Base class for package errors."""


class ConfigError(BsmpError):
    """Malformed or inconsistent run configuration."""


class GradCheckError(BsmpError):
    """A finite-difference probe produced a non-finite quotient."""


class RegressionError(BsmpError):
    """Basis rank deficiency beyond what ridge regularization repairs."""

    def __init__(self, step: int, condition: float, message: str = ""):
        self.step = step
        self.condition = condition
        text = message or f"regression failed at step {step} (condition estimate {condition:.3e})"
        super().__init__(text)


class SolverError(BsmpError):
    """Non-finite values appeared during a solve."""

    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")
