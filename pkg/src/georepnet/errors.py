"""Exception types shared across the package."""


class GeoRepNetError(Exception):
    """Base class for every error raised by georepnet."""


class DimensionError(GeoRepNetError, ValueError):
    """Tensor shapes disagree along some axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ConfigurationError(GeoRepNetError, ValueError):
    pass


class UsageError(GeoRepNetError, RuntimeError):
    pass


class DataError(GeoRepNetError, ValueError):
    """Input data violates a range or finiteness contract."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NonFiniteError(DataError):
    pass


class FormatError(GeoRepNetError, ValueError):
    """Malformed binary container. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
