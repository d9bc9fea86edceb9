"""Exception types shared across modules, with stable error codes."""


class DataError(Exception):
    """A data or checkpoint file could not be used."""

    code = "E_DATA"

    def __init__(self, message: str):
        super().__init__(f"[{self.code}] {message}")


class BadMagicError(DataError):
    code = "E_MAGIC"


class VersionMismatchError(DataError):
    code = "E_VERSION"


class TruncatedFileError(DataError):
    code = "E_TRUNCATED"


class ChecksumError(DataError):
    code = "E_CHECKSUM"


class ConfigError(ValueError):
    """Bad or incomplete configuration."""
