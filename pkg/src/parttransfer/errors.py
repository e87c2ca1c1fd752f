"""Exception hierarchy shared by every module."""

from __future__ import annotations


class TransferError(Exception):
    """Base class for all errors raised by this package."""


class InvalidSizeError(TransferError, ValueError):
    pass


class DegenerateBoxError(TransferError, ValueError):
    pass


class EmptyInputError(TransferError, ValueError):
    pass


class NoOverlapError(TransferError, ValueError):
    pass


class DimensionError(TransferError, ValueError):
    pass


class UndefinedNormError(TransferError, ValueError):
    pass


class UnknownImageError(TransferError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else "unknown image"


class StageUnavailableError(TransferError, LookupError):
    """The provider cannot serve the requested stage for this image."""


class AnnotationUnavailableError(TransferError, LookupError):
    """None of the retrieved neighbors carries the requested box."""


class EmptyIndexError(TransferError, ValueError):
    pass


class DuplicateIdError(TransferError, ValueError):
    pass


class ManifestError(TransferError, ValueError):
    """Manifest parse or validation failure, located by file and line."""

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class UnknownClassError(TransferError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown class"


class ConfigError(TransferError, ValueError):
    pass
