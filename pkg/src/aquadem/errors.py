"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation-type errors exit with 2,
numerical failures with 3.
"""


class AquademError(Exception):
    pass


class StructuralError(AquademError, ValueError):
    """Shape or dimension mismatch, stale cache, bad index."""


class DomainError(AquademError, ValueError):
    """Argument outside its mathematical domain (e.g. temperature <= 0)."""


class InputError(AquademError, ValueError):
    """Bad user-provided data or configuration."""


class DegenerateClusterError(InputError):
    pass


class NumericalError(AquademError, ArithmeticError):
    """Non-finite values encountered during a computation."""

    def __init__(self, message, step=None, layer=None):
        super().__init__(message)
        self.step = step
        self.layer = layer
