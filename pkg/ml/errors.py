"""
Exception hierarchy shared by the bound, filtering, environment and training code.
"""

from typing import Optional


class AnticipationError(Exception):
    """Base class for all errors raised by this package"""


class BeliefValidationError(AnticipationError, ValueError):
    """A probability vector is malformed (negative entries, wrong sum, too short)"""


class BoundApplicabilityError(AnticipationError, ValueError):
    """The tangent bound is requested outside 1 <= r' - r'' <= n_y"""


class ImpossibleObservationError(AnticipationError, ValueError):
    """An observation has zero likelihood under the current belief"""


class EnumerationLimitError(AnticipationError, ValueError):
    """A brute-force enumeration would exceed its size guard"""


class ParticleDegeneracyError(AnticipationError, RuntimeError):
    """Every particle received zero weight"""


class EpisodeStateError(AnticipationError, RuntimeError):
    """An episode stepper was used after it finished"""


class NumericError(AnticipationError, FloatingPointError):
    """A non-finite value reached the optimizer"""


class ShapeError(AnticipationError, ValueError):
    """Array dimensions do not match a network specification"""


class ConfigError(AnticipationError, ValueError):
    """Invalid run configuration"""


class IdxFormatError(AnticipationError, ValueError):
    """
    Malformed IDX file.

    `code` is one of bad_magic, truncated, trailing_bytes, count_mismatch;
    `offset` is the byte position where parsing failed.
    """

    def __init__(self, message: str, code: str, offset: Optional[int] = None):
        self.code = code
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
