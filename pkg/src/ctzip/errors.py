"""Exception hierarchy shared by all ctzip modules."""


class CtzipError(Exception):
    """Base class for every error raised by ctzip."""


class FormatError(CtzipError):
    """Malformed file header, wrong magic or version, inconsistent payload."""


class UnsupportedDepthError(FormatError):
    """Image bit depth other than 8 bits."""


class ShapeError(CtzipError, ValueError):
    """Array or image dimensions do not match what an operation requires."""


class BoundsError(CtzipError, ValueError):
    """A crop rectangle or placement falls outside the source image."""


class ConfigError(CtzipError, ValueError):
    """Invalid model, training or generator configuration."""


class DataError(CtzipError, ValueError):
    """Values outside the domain an operation accepts (non-finite, out of range)."""


class DegenerateHistogramError(DataError):
    """Histogram with fewer than two occupied bins."""


class TruncatedError(CtzipError, OSError):
    """File ended before the declared payload was read."""
