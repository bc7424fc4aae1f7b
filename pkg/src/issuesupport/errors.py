"""Exception hierarchy shared across the package."""

from __future__ import annotations


class IssueSupportError(Exception):
    """Base class for all package errors."""


class UnknownSubclass(IssueSupportError, ValueError):
    def __init__(self, label: str):
        super().__init__(f"unknown invalid subclass: {label!r}")
        self.label = label


class UnknownOutlier(IssueSupportError, ValueError):
    def __init__(self, label: str):
        super().__init__(f"unknown outlier label: {label!r}")
        self.label = label


class SchemaError(IssueSupportError, ValueError):
    def __init__(self, message: str, line_no: int | None = None):
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{where}{message}")
        self.line_no = line_no


# --- ingest -----------------------------------------------------------------


class TransportError(IssueSupportError):
    pass


class AuthError(TransportError):
    pass


class RateLimited(TransportError):
    def __init__(self, retry_after: float | None):
        super().__init__(f"rate limited (retry after {retry_after}s)")
        self.retry_after = retry_after


# --- curation ---------------------------------------------------------------


class InvalidParams(IssueSupportError, ValueError):
    pass


class SampleTooLarge(IssueSupportError, ValueError):
    pass


class BadAnnotatorCount(IssueSupportError, ValueError):
    pass


class AdjudicationRequired(IssueSupportError):
    def __init__(self, report_id: int):
        super().__init__(f"report {report_id}: primary labels disagree and no adjudicator given")
        self.report_id = report_id


class LengthMismatch(IssueSupportError, ValueError):
    pass


class EmptyInput(IssueSupportError, ValueError):
    pass


# --- llm gateway ------------------------------------------------------------


class ProviderError(IssueSupportError):
    def __init__(self, status: int | None, body: str = ""):
        super().__init__(f"provider error (status={status}): {body[:200]}")
        self.status = status
        self.body = body


class BudgetExceeded(IssueSupportError):
    pass


class ScriptExhausted(IssueSupportError):
    pass


# --- prompting --------------------------------------------------------------


class ParseFailure(IssueSupportError, ValueError):
    def __init__(self, raw: str, reason: str = "no JSON object found"):
        super().__init__(reason)
        self.raw = raw


class MissingField(IssueSupportError, ValueError):
    def __init__(self, name: str):
        super().__init__(f"missing field: {name}")
        self.name = name


class ContextMismatch(IssueSupportError, ValueError):
    pass


class LeakageError(IssueSupportError):
    pass


# --- retrieval --------------------------------------------------------------


class EmbedderError(IssueSupportError):
    pass


class DimensionMismatch(IssueSupportError, ValueError):
    pass


class RerankerError(IssueSupportError):
    pass


# --- agentic search ---------------------------------------------------------


class SearchProviderError(IssueSupportError):
    pass


class FetchError(IssueSupportError):
    pass


class SummarizerError(IssueSupportError):
    pass


class ExcludedSource(IssueSupportError):
    pass


class OrchestratorError(IssueSupportError):
    pass


# --- evaluation / cli -------------------------------------------------------


class GoldMismatch(IssueSupportError, ValueError):
    pass


class ConfigError(IssueSupportError, ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path
