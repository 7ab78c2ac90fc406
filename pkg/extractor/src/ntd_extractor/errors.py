"""Exception taxonomy for the extraction adapter."""


class ExtractorError(Exception):
    """Base class for everything this package raises on purpose."""


class ValidationError(ExtractorError):
    """Configuration or input violates a stated precondition."""


class ModelLoadError(ExtractorError):
    """The requested model cannot be constructed or its weights loaded."""


class DecodeError(ExtractorError):
    """An image file cannot be decoded."""


class IoError(ExtractorError):
    """Filesystem-level failure while reading or writing artifacts."""
