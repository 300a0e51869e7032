"""Exception types raised across the package."""


class NTPPError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(NTPPError, ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(NTPPError, ValueError):
    """An input that must be finite contains NaN or inf."""


class StreamError(NTPPError, ValueError):
    """A token stream or interleaved sequence violates its invariants."""


class CapacityError(NTPPError):
    """A sequence or cache exceeds the configured maximum length."""


class ProfileError(NTPPError, ValueError):
    """A dialogue profile cannot be realised."""


class TrainingDiverged(NTPPError):
    """The training loss became non-finite."""


class ReportError(NTPPError, ValueError):
    """Event reports cannot be computed or compared."""
