"""Shared report data model and its JSON encoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Iterable

from .errors import SchemaError
from .taxonomy import InvalidSubclass, OutlierLabel, parse_gold_label

FIX_SEPARATOR = "\n\n"


def parse_timestamp(value: str | datetime) -> datetime:
    """Parse an RFC 3339 timestamp into an aware UTC datetime."""
    if isinstance(value, datetime):
        dt = value
    else:
        text = value.strip()
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_timestamp(dt: datetime | None) -> str | None:
    if dt is None:
        return None
    return dt.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


@dataclass(frozen=True)
class Comment:
    id: int
    author: str
    body: str
    created_at: datetime
    reactions: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if any(v < 0 for v in self.reactions.values()):
            raise ValueError(f"comment {self.id}: negative reaction count")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "author": self.author,
            "body": self.body,
            "created_at": format_timestamp(self.created_at),
            "reactions": dict(sorted(self.reactions.items())),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Comment":
        return cls(
            id=int(d["id"]),
            author=d.get("author") or "",
            body=d.get("body") or "",
            created_at=parse_timestamp(d["created_at"]),
            reactions={k: int(v) for k, v in (d.get("reactions") or {}).items()},
        )


@dataclass(frozen=True)
class BugReport:
    id: int
    title: str
    body: str
    labels: frozenset[str]
    created_at: datetime
    closed_at: datetime | None = None
    comments: tuple[Comment, ...] = ()
    url: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", frozenset(self.labels))
        object.__setattr__(self, "comments", tuple(self.comments))
        if self.closed_at is not None and self.closed_at < self.created_at:
            raise ValueError(f"report {self.id}: closed_at precedes created_at")
        stamps = [c.created_at for c in self.comments]
        if stamps != sorted(stamps):
            raise ValueError(f"report {self.id}: comments not in chronological order")

    def comment(self, comment_id: int) -> Comment:
        for c in self.comments:
            if c.id == comment_id:
                return c
        raise KeyError(comment_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "title": self.title,
            "body": self.body,
            "labels": sorted(self.labels),
            "created_at": format_timestamp(self.created_at),
            "closed_at": format_timestamp(self.closed_at),
            "url": self.url,
            "comments": [c.to_dict() for c in self.comments],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BugReport":
        return cls(
            id=int(d["id"]),
            title=d.get("title") or "",
            body=d.get("body") or "",
            labels=frozenset(d.get("labels") or ()),
            created_at=parse_timestamp(d["created_at"]),
            closed_at=parse_timestamp(d["closed_at"]) if d.get("closed_at") else None,
            comments=tuple(Comment.from_dict(c) for c in d.get("comments") or ()),
            url=d.get("url") or "",
        )


class FixOutcome(str, Enum):
    SUCCESSFUL = "successful"
    FAILED = "failed"


@dataclass(frozen=True)
class NoCodeFix:
    comment_ids: tuple[int, ...]
    text: str
    outcome: FixOutcome

    @classmethod
    def from_comments(cls, report: BugReport, comment_ids: Iterable[int], outcome: FixOutcome) -> "NoCodeFix":
        wanted = set(comment_ids)
        if not wanted:
            raise ValueError("a fix needs at least one comment")
        missing = wanted - {c.id for c in report.comments}
        if missing:
            raise ValueError(f"report {report.id}: unknown comment ids {sorted(missing)}")
        ordered = [c for c in report.comments if c.id in wanted]
        return cls(
            comment_ids=tuple(c.id for c in ordered),
            text=FIX_SEPARATOR.join(c.body for c in ordered),
            outcome=FixOutcome(outcome),
        )

    def to_dict(self) -> dict[str, Any]:
        return {"comment_ids": list(self.comment_ids), "text": self.text, "outcome": self.outcome.value}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NoCodeFix":
        return cls(comment_ids=tuple(int(i) for i in d["comment_ids"]), text=d["text"], outcome=FixOutcome(d["outcome"]))


GoldLabel = InvalidSubclass | OutlierLabel


@dataclass(frozen=True)
class BenchmarkRecord:
    report: BugReport
    gold_label: GoldLabel
    fixes: tuple[NoCodeFix, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "fixes", tuple(self.fixes))
        if isinstance(self.gold_label, OutlierLabel) and self.fixes:
            raise ValueError(f"report {self.report.id}: outlier-labeled records carry no fixes")
        known = {c.id for c in self.report.comments}
        for fix in self.fixes:
            if not fix.comment_ids or not set(fix.comment_ids) <= known:
                raise ValueError(f"report {self.report.id}: fix references unknown comments")

    @property
    def is_taxonomy(self) -> bool:
        return isinstance(self.gold_label, InvalidSubclass)

    @property
    def successful_fixes(self) -> list[NoCodeFix]:
        return [f for f in self.fixes if f.outcome is FixOutcome.SUCCESSFUL]

    @property
    def failed_fixes(self) -> list[NoCodeFix]:
        return [f for f in self.fixes if f.outcome is FixOutcome.FAILED]

    def to_dict(self) -> dict[str, Any]:
        return {
            "report": self.report.to_dict(),
            "gold_label": self.gold_label.value,
            "fixes": [f.to_dict() for f in self.fixes],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BenchmarkRecord":
        return cls(
            report=BugReport.from_dict(d["report"]),
            gold_label=parse_gold_label(d["gold_label"]),
            fixes=tuple(NoCodeFix.from_dict(f) for f in d.get("fixes") or ()),
        )


def decode(kind: type, payload: dict[str, Any], line_no: int | None = None):
    """Build ``kind`` from a decoded JSON object, mapping failures to SchemaError."""
    try:
        return kind.from_dict(payload)
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise SchemaError(f"invalid {kind.__name__}: {exc}", line_no) from exc


@dataclass(frozen=True)
class ContextItem:
    """One piece of evidence handed to the model, from retrieval or web search."""

    doc_id: str
    corpus: str
    text: str
    score: float = 0.0
    created_at: datetime | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "doc_id": self.doc_id,
            "corpus": self.corpus,
            "text": self.text,
            "score": self.score,
            "created_at": format_timestamp(self.created_at),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ContextItem":
        return cls(
            doc_id=str(d["doc_id"]),
            corpus=str(d["corpus"]),
            text=d.get("text") or "",
            score=float(d.get("score") or 0.0),
            created_at=parse_timestamp(d["created_at"]) if d.get("created_at") else None,
        )


@dataclass(frozen=True)
class RetrievedContext:
    """Ranked evidence for one query report (best first)."""

    query_report_id: int
    items: tuple[ContextItem, ...] = ()
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_report_id": self.query_report_id,
            "items": [i.to_dict() for i in self.items],
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RetrievedContext":
        return cls(
            query_report_id=int(d["query_report_id"]),
            items=tuple(ContextItem.from_dict(i) for i in d.get("items") or ()),
            metadata=dict(d.get("metadata") or {}),
        )
