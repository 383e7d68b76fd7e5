"""Exception types raised across the toolkit."""


class MobinetError(Exception):
    """Base class for all toolkit errors."""


class EncodingError(MobinetError):
    """A value cannot be encoded as a single bit (not exactly +1 or -1)."""


class DimensionError(MobinetError):
    """Operand shapes or lengths are incompatible."""


class InvariantError(MobinetError):
    """A checked-mode construction invariant is violated."""


class DegenerateFilterError(MobinetError):
    """All-zero filter: the optimal scale would be 0, violating alpha > 0."""


class StaleLayerError(MobinetError):
    """Binary weights/scales are out of sync with the latent weights."""


class StateError(MobinetError):
    """An operation ran before its required state existed (e.g. backward before forward)."""


class ConfigError(MobinetError):
    """Invalid or unknown configuration key/value."""


class DatasetError(MobinetError):
    """Malformed dataset file or inconsistent dataset spec."""


class FormatError(MobinetError):
    """Malformed model or checkpoint file."""


class ChecksumError(FormatError):
    """Stored CRC32 does not match the file contents."""


class VersionError(FormatError):
    """File format version is not supported by this build."""


class DivergenceError(MobinetError):
    """Training loss became NaN. Carries the history captured up to the abort."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []
