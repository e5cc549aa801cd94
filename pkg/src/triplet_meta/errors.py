"""Exception hierarchy shared across the package."""

from __future__ import annotations


class TripletMetaError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(TripletMetaError):
    """Invalid or inconsistent run configuration (maps to CLI exit code 2)."""


class DataError(TripletMetaError):
    """Malformed or invalid study data, annotated with its location."""

    def __init__(self, message: str, *, row: int | None = None,
                 field: str | None = None, study_id: str | None = None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if study_id is not None:
            loc.append(f"study {study_id!r}")
        if field is not None:
            loc.append(f"field {field!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.field = field
        self.study_id = study_id


class OracleError(TripletMetaError):
    """Failure while obtaining a similarity judgment."""


class TransportError(OracleError):
    """HTTP transport failed after all retries."""


class ReplyParseError(OracleError):
    """Oracle reply could not be parsed into a judgment after all retries."""

    def __init__(self, message: str, raw_reply: str = ""):
        super().__init__(message)
        self.raw_reply = raw_reply


class ArtifactError(TripletMetaError):
    """A pipeline stage dependency (an on-disk artifact) is missing or unreadable."""


class DivergenceError(TripletMetaError):
    """Numerical divergence during embedding training."""
