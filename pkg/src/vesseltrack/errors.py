"""Exception types shared across the package."""


class VesselTrackError(Exception):
    """Base class for all package errors."""


class ValidationError(VesselTrackError, ValueError):
    """An argument or file field violates a documented invariant."""


class FormatError(VesselTrackError):
    """A file does not follow its declared on-disk format."""


class HeaderError(FormatError):
    """Malformed or missing header line."""


class TruncatedPayloadError(FormatError):
    """Payload ends before the declared number of values."""


class LengthMismatchError(FormatError):
    """Payload length disagrees with the declared dimensions."""


class VersionError(FormatError):
    """Unsupported file version."""


class ShapeMismatchError(VesselTrackError, ValueError):
    """Tensor shapes or class counts disagree with what the caller expects."""


class NumericalError(VesselTrackError, ArithmeticError):
    """A computation produced non-finite values."""
