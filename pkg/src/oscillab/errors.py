"""Exception hierarchy shared by all oscillab modules."""


class OscillabError(Exception):
    """Base class for every error raised by this package."""


class InvalidParameters(OscillabError, ValueError):
    pass


class NonFinite(OscillabError, FloatingPointError):
    """A numerical update produced NaN or Inf."""


class StepFailure(OscillabError):
    """Adaptive step halving reached the minimum step without success."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class RejectionRateExceeded(StepFailure):
    pass


class InvalidDomain(OscillabError, ValueError):
    pass


class CenterOutOfDomain(OscillabError, ValueError):
    pass


class StabilityViolation(OscillabError):
    pass


class HistoryMismatch(OscillabError, ValueError):
    pass


class DegenerateNormalization(OscillabError, ZeroDivisionError):
    pass


class NegativeVariance(OscillabError, ValueError):
    pass


class EffectiveSampleTooSmall(OscillabError):
    def __init__(self, message, ess=None):
        super().__init__(message)
        self.ess = ess


class QuadratureNotConverged(OscillabError):
    pass


class NotHermitian(OscillabError, ValueError):
    pass


class NonPositiveTrace(OscillabError, ValueError):
    pass


class NonPositiveU2(OscillabError, ValueError):
    pass


class UnsupportedOperator(OscillabError, ValueError):
    pass


class SchemaError(OscillabError, ValueError):
    """Configuration failed validation; ``field`` names the offending key."""

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line


class IoError(OscillabError, OSError):
    """An output artifact could not be written."""
