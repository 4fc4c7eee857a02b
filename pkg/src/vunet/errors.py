class VUNetError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(VUNetError, ValueError):
    """Inconsistent shapes, sizes or settings."""


class DomainError(VUNetError, ValueError):
    """An argument outside the mathematical domain of a function."""


class NumericError(VUNetError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(VUNetError):
    """Base class for on-disk format problems."""


class ChecksumError(FormatError):
    def __init__(self, path, expected=None, actual=None):
        self.path = str(path)
        msg = f"checksum mismatch in {self.path}"
        if expected is not None:
            msg += f" (expected {expected:08x}, got {actual:08x})"
        super().__init__(msg)


class MissingFileError(FormatError, FileNotFoundError):
    pass


class VersionError(FormatError):
    pass


class ValidationError(FormatError, ValueError):
    """File content is readable but inconsistent with its manifest or with the caller's expectations."""


class TruncatedFileError(FormatError):
    pass
