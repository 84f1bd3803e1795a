"""Exception types shared across the package.

Everything derives from ValueError so callers that don't care about the
distinction can catch broadly, while tests and the CLI can be precise.
"""


class TweendiffError(ValueError):
    """Base class for all package errors."""


class DomainError(TweendiffError):
    """An argument is outside its mathematical domain (e.g. t not in [0,1])."""


class ShapeError(TweendiffError):
    """Tensor shapes or resolutions are inconsistent."""


class OrderingError(TweendiffError):
    """A time pair violates the required ordering (s < t)."""


class ConfigError(TweendiffError):
    """A configuration value or combination is invalid."""


class StateError(TweendiffError):
    """An operation was applied to an object in the wrong state."""


class ModeError(TweendiffError):
    """A sampler mode was used with an incompatible model."""


class SizeError(TweendiffError):
    """A collection is too small for the requested operation."""


class ClipFormatError(TweendiffError):
    """A clip directory does not match the on-disk format contract."""


class RespecifyError(TweendiffError):
    """A sprite path leaves the canvas; the spec must be adjusted."""


class TrainingDivergence(RuntimeError):
    """Training produced a non-finite loss; carries step diagnostics."""

    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")
