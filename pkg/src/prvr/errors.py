"""Exception hierarchy shared by every prvr module."""

from __future__ import annotations


class PrvrError(Exception):
    """Base class for all library errors."""


class DimensionError(PrvrError, ValueError):
    pass


class ParameterError(PrvrError, ValueError):
    pass


class ContractError(PrvrError, ValueError):
    pass


class DegenerateInputError(PrvrError, ValueError):
    pass


class BatchError(PrvrError, ValueError):
    pass


class FormatError(PrvrError, ValueError):
    """Binary feature or checkpoint file does not match the documented layout."""

    def __init__(self, message: str, path: str | None = None, offset: int | None = None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ManifestError(PrvrError, ValueError):
    """Malformed manifest.json; carries the offending path and field."""

    def __init__(self, message: str, path: str | None = None, field: str | None = None):
        self.path = path
        self.field = field
        parts = [p for p in (str(path) if path else None, f"field {field!r}" if field else None) if p]
        super().__init__(f"{message} [{'; '.join(parts)}]" if parts else message)


class DataError(PrvrError, ValueError):
    pass


class ConfigError(PrvrError, ValueError):
    pass


class NumericalError(PrvrError, ArithmeticError):
    """Non-finite loss during training."""

    def __init__(self, message: str, batch_ids: list | None = None, details: dict | None = None):
        self.batch_ids = list(batch_ids or [])
        self.details = dict(details or {})
        super().__init__(message)
