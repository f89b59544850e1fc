"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: ``UsageError`` and
``DataError`` exit 2, ``NonFiniteError`` exits 1, ``VerificationError`` exits 3.
"""


class UsageError(ValueError):
    """Caller violated a precondition (shapes, ranges, empty inputs)."""


class DataError(ValueError):
    """Input data is malformed (bad checkpoint, non-PSD covariance, bad config)."""


class NonFiniteError(ArithmeticError):
    """A loss, gradient or parameter became NaN or infinite."""


class VerificationError(AssertionError):
    """An assert-mode bound check failed."""
