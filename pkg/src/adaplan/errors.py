"""Exception types shared across the package."""

from __future__ import annotations


class AdaplanError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(AdaplanError):
    """Invalid configuration: bad key, bad value, missing file, mismatched models."""


class ArchitectureError(AdaplanError):
    """Invalid network architecture (too few layers, non-positive sizes, ...)."""


class ShapeError(AdaplanError):
    """An array argument has the wrong shape or dimension."""


class NumericError(AdaplanError):
    """A numeric quantity that must be finite is not."""


class DomainError(AdaplanError):
    """A value lies outside its mathematical domain (e.g. variance <= 0)."""


class FormatError(AdaplanError):
    """A binary file does not match the expected on-disk format.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, *, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SamplingDivergedError(NumericError):
    """Reverse-process sampling produced a non-finite value.

    ``step`` is the denoising step k at which divergence was detected.
    """

    def __init__(self, step: int, detail: str = ""):
        message = f"sampling diverged at denoising step k={step}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
        self.step = step


class InvalidActionError(AdaplanError):
    """An action passed to the environment is non-finite or badly shaped."""
