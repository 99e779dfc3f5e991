"""Exception hierarchy shared across the package."""


class VaredError(Exception):
    pass


class ShapeError(VaredError, ValueError):
    """Raised when tensor shapes disagree; the message names the offending dimension."""


class TapeError(VaredError, RuntimeError):
    pass


class SpecError(VaredError, ValueError):
    """Invalid model or layer specification."""


class ConfigError(VaredError, ValueError):
    pass


class ClipFormatError(VaredError, ValueError):
    pass


class BadMagicError(ClipFormatError):
    pass


class TruncatedFileError(ClipFormatError):
    pass


class DimOverflowError(ClipFormatError):
    pass


class ManifestError(VaredError, ValueError):
    pass


class DivergenceError(VaredError, FloatingPointError):
    """Training produced a non-finite loss."""
