"""
Exception hierarchy shared by the training engine, the benchmarks and the CLI.

The CLI maps these onto exit codes (see main.py). Errors raised inside worker
processes travel back to the parent, so each class pickles with its own
constructor arguments.
"""

from typing import Optional


class PlasticityError(Exception):
    """Base class for every error raised by this package"""


class ConfigError(PlasticityError, ValueError):
    """Invalid, unknown or forbidden configuration value"""

    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")

    def __reduce__(self):
        return (type(self), (self.field, self.message))


class ShapeError(PlasticityError, ValueError):
    """Array dimensions do not agree"""


class DataError(PlasticityError):
    """Dataset file missing, truncated or malformed"""

    def __init__(self, field: str, message: str, path: Optional[str] = None):
        self.field = field
        self.message = message
        self.path = path
        where = f" ({path})" if path else ""
        super().__init__(f"{field}: {message}{where}")

    def __reduce__(self):
        return (type(self), (self.field, self.message, self.path))


class DivergenceError(PlasticityError):
    """Non-finite loss or weights during training"""

    def __init__(self, step: int, message: str = "non-finite values"):
        self.step = step
        self.message = message
        super().__init__(f"diverged at step {step}: {message}")

    def __reduce__(self):
        return (type(self), (self.step, self.message))


class UnsupportedMeasureError(PlasticityError):
    """Diagnostic requested for an activation it is not defined on"""


class UndefinedRankError(PlasticityError, ValueError):
    """Effective rank of an all-zero matrix"""
