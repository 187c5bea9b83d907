"""Exception hierarchy for the tsfuse package.

Every operation raises a named subclass of :class:`TsfuseError` so callers
(and the CLI exit-code mapping) can distinguish input problems, numeric
failures, and compatibility failures without string matching.
"""


class TsfuseError(Exception):
    """Base class for all package errors."""


# --- data ingestion -------------------------------------------------------

class MissingColumn(TsfuseError):
    pass


class RaggedLength(TsfuseError):
    pass


class NonNumericCell(TsfuseError):
    pass


class NaNValue(TsfuseError):
    pass


class EmptyTrainSplit(TsfuseError):
    pass


class WindowTooLong(TsfuseError):
    pass


class BadMode(TsfuseError):
    pass


# --- augmentation ---------------------------------------------------------

class RateOutOfRange(TsfuseError):
    pass


class NotEnoughNegatives(TsfuseError):
    pass


class BadPolicyParams(TsfuseError):
    pass


# --- encoders / fusion ----------------------------------------------------

class TooShort(TsfuseError):
    pass


class InputTooShort(TsfuseError):
    pass


class ShapeMismatch(TsfuseError):
    pass


class ZeroNorm(TsfuseError):
    pass


# --- loss -----------------------------------------------------------------

class NotNormalized(TsfuseError):
    pass


class DomainError(TsfuseError):
    pass


class EmptyNegatives(TsfuseError):
    pass


# --- training -------------------------------------------------------------

class NonFiniteLoss(TsfuseError):
    pass


class NonFinitePerturbation(TsfuseError):
    pass


class VersionMismatch(TsfuseError):
    pass


class CorruptFile(TsfuseError):
    pass


# --- evaluation -----------------------------------------------------------

class SingleClassSplit(TsfuseError):
    pass


class HorizonExceedsData(TsfuseError):
    pass


class NoAnomaliesInTest(TsfuseError):
    pass


class TooFewSamples(TsfuseError):
    pass


# --- config ---------------------------------------------------------------

class ConfigError(TsfuseError):
    """Experiment config failed schema validation; message names the JSON path."""
