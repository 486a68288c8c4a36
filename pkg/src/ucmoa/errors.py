"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1, bad input
data exits 2, numeric failures exit 3.
"""


class UCMOAError(Exception):
    exit_code = 1


class ConfigError(UCMOAError, ValueError):
    exit_code = 1


class DataError(UCMOAError, ValueError):
    exit_code = 2


class ShapeError(DataError):
    """Input dimensions do not match the model or the declared K."""


class ParseError(DataError):
    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{location}: {message}"
        super().__init__(message)


class StateError(UCMOAError, RuntimeError):
    """Operation requested on an empty or uninitialized structure."""

    exit_code = 2


class NumericError(UCMOAError, ArithmeticError):
    exit_code = 3


class DegenerateRangeError(NumericError):
    """All tracked returns coincide, so the normalization scale is zero."""


class TrainingDivergenceError(NumericError):
    def __init__(self, step, message="non-finite loss"):
        self.step = step
        super().__init__(f"training diverged at step {step}: {message}")
