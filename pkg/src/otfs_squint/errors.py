"""Exception types shared across the package.

Every error raised on purpose by this package derives from SquintError so
callers can catch one base class at the CLI boundary.
"""

from __future__ import annotations


class SquintError(Exception):
    """Base class for all errors raised by this package."""


# --- configuration -------------------------------------------------------

class DivisibilityError(SquintError):
    """An integer parameter does not divide evenly where required."""


class RangeError(SquintError):
    """A numeric parameter lies outside its allowed range."""


class ParseError(SquintError):
    """A config or experiment spec file could not be parsed."""


# --- array plumbing ------------------------------------------------------

class DimMismatch(SquintError):
    """An array argument has the wrong shape for the configured grid."""


class LengthError(SquintError):
    """A sequence argument has the wrong length."""


class ScaleError(SquintError):
    """A transform pair failed its round-trip energy or scale check."""


# --- estimation ----------------------------------------------------------

class NoPathDetected(SquintError):
    """The sweep detector found no angle above the detection threshold."""


class DegenerateDenominator(SquintError):
    """A three-point interpolation denominator is too close to zero."""


class ZeroGainError(SquintError):
    """A path gain required for normalization is zero (or numerically so)."""


# --- precoding -----------------------------------------------------------

class MappingError(SquintError):
    """The path-to-chain assignment is invalid (duplicate or out of range)."""


class InfeasibleError(SquintError):
    """No delay offset satisfies the index-set constraints for all paths."""


class ZeroNormError(SquintError):
    """Power allocation was asked to normalize an all-zero gain vector."""


# --- experiment harness --------------------------------------------------

class UnknownExperiment(SquintError):
    """The experiment name in a spec file is not one this package defines."""


class UnknownAxis(SquintError):
    """The sweep axis in a spec file is not valid for the experiment."""
