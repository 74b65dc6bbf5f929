"""Exception hierarchy shared by every addrparse module."""

from __future__ import annotations


class AddrParseError(Exception):
    """Base class for all library errors."""


class EmptyAddress(AddrParseError, ValueError):
    pass


class SchemaError(AddrParseError, ValueError):
    """A corpus line or report does not match the expected schema."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(AddrParseError, ValueError):
    pass


class IncompatiblePattern(AddrParseError, ValueError):
    pass


class DimensionMismatch(AddrParseError, ValueError):
    pass


class LengthMismatch(AddrParseError, ValueError):
    pass


class AllMasked(AddrParseError, ValueError):
    pass


class NotScalar(AddrParseError, ValueError):
    pass


class VersionError(AddrParseError):
    pass


class CorruptFile(AddrParseError):
    pass


class Diverged(AddrParseError, RuntimeError):
    """Training loss blew up; the protocol retries with another seed."""

    def __init__(self, message: str, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(message)


class ProtocolFailed(AddrParseError, RuntimeError):
    pass


class TooFewRuns(AddrParseError, ValueError):
    pass
