"""Exception taxonomy shared across the package.

Callers that need to distinguish failure kinds (the CLI maps config errors
to a different exit code than runtime errors) catch these instead of bare
ValueError/RuntimeError.
"""

from __future__ import annotations


class GzoomError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(GzoomError, ValueError):
    """Tensor arguments have inconsistent or unsupported shapes."""


class NumericError(GzoomError, ValueError):
    """Numeric inputs are unusable (NaN or Inf where finite values are required)."""


class UsageError(GzoomError, RuntimeError):
    """API called out of order, e.g. backward before any forward pass."""


class ConfigError(GzoomError, ValueError):
    """Invalid configuration value or malformed config file."""


class DataFormatError(GzoomError, ValueError):
    """Base for structured errors while reading binary artifacts."""


class BadMagicError(DataFormatError):
    """File does not start with the expected magic bytes."""


class VersionError(DataFormatError):
    """File declares an unsupported format version."""


class TruncatedError(DataFormatError):
    """File ended before a declared field or payload was complete."""


class NoEvidenceError(GzoomError):
    """A saliency map is degenerate (all zero), so no peak can be taken."""


class TrainingDivergedError(GzoomError, RuntimeError):
    """Training produced a non-finite loss.

    Carries the iteration index and learning rate at the point of failure so
    the caller can report actionable diagnostics.
    """

    def __init__(self, iteration: int, lr: float):
        self.iteration = iteration
        self.lr = lr
        super().__init__(
            f"non-finite loss at iteration {iteration} (lr={lr:g}); "
            "lower the learning rate or check the input data"
        )
