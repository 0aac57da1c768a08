"""Exception hierarchy for vsmlab.

The CLI maps each family onto an exit code: configuration problems exit 2,
numerical divergence exits 3 and failed acceptance checks exit 4.
"""

from typing import Optional, Sequence


class VsmError(Exception):
    """Base class for all vsmlab errors."""


class ConfigError(VsmError, ValueError):
    """Invalid configuration, or an output directory that would be overwritten."""

    def __init__(self, message: str, field_path: Optional[str] = None):
        self.field_path = field_path
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)


class DivergenceError(VsmError, ArithmeticError):
    """
    Raised when a loss, gradient or parameter stops being finite.

    Attributes:
        quantity: Name of the quantity that went non-finite
        step: Training/optimizer step at which it happened (None if unknown)
    """

    def __init__(self, quantity: str, step: Optional[int] = None, message: str = ""):
        self.quantity = quantity
        self.step = step
        if not message:
            where = f" at step {step}" if step is not None else ""
            message = f"Non-finite {quantity}{where}"
        super().__init__(message)


class AcceptanceError(VsmError):
    """One or more oracle checks failed."""

    def __init__(self, failed: Sequence[str], message: str = ""):
        self.failed = list(failed)
        if not message:
            message = f"{len(self.failed)} check(s) failed: {', '.join(self.failed)}"
        super().__init__(message)
