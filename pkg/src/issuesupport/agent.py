"""Bounded search agent: an orchestrator model picks search/visit/finish actions and builds an evidence log."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from html.parser import HTMLParser
from pathlib import Path
from typing import Any, Callable, Protocol
from urllib.parse import urlsplit, urlunsplit

import httpx

from .errors import (
    BudgetExceeded,
    ExcludedSource,
    FetchError,
    OrchestratorError,
    ParseFailure,
    ProviderError,
    SearchProviderError,
    SummarizerError,
)
from .llm import Gateway, Role
from .models import BugReport, ContextItem, RetrievedContext, format_timestamp
from .prompting import load_template, render
from .ratelimit import backoff_delay
from .storage import read_json, write_json

log = logging.getLogger(__name__)

SEARCH_KEY_ENV = "SEARCH_API_KEY"
PAGE_CHAR_CAP = 50_000
EXCLUDED_MARK = "[excluded source]"
USER_AGENT = "issuesupport-agent/0.1 (+research; contact repository maintainers)"


@dataclass(frozen=True)
class AgentBudget:
    max_turns: int = 35
    max_searches: int = 3
    max_page_visits: int = 3
    per_call_timeout: float = 30.0

    def __post_init__(self) -> None:
        for name in ("max_turns", "max_searches", "max_page_visits", "per_call_timeout"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# --- actions -----------------------------------------------------------------


@dataclass(frozen=True)
class Search:
    query: str

    def __post_init__(self) -> None:
        if not self.query.strip():
            raise ValueError("empty search query")

    def to_dict(self) -> dict[str, Any]:
        return {"action": "search", "query": self.query}


@dataclass(frozen=True)
class Visit:
    url: str

    def __post_init__(self) -> None:
        if not self.url.strip():
            raise ValueError("empty url")

    def to_dict(self) -> dict[str, Any]:
        return {"action": "visit", "url": self.url}


@dataclass(frozen=True)
class Finish:
    def to_dict(self) -> dict[str, Any]:
        return {"action": "finish"}


AgentAction = Search | Visit | Finish


def parse_action(reply: str) -> AgentAction:
    """Decode the one-action JSON envelope; anything else is a ParseFailure."""
    start, end = reply.find("{"), reply.rfind("}")
    if start == -1 or end <= start:
        raise ParseFailure(reply, "no action object")
    try:
        obj = json.loads(reply[start : end + 1])
    except json.JSONDecodeError as exc:
        raise ParseFailure(reply, f"bad JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseFailure(reply, "action is not an object")
    kind = str(obj.get("action", "")).strip().lower()
    try:
        if kind == "search":
            return Search(str(obj.get("query") or ""))
        if kind == "visit":
            return Visit(str(obj.get("url") or ""))
    except ValueError as exc:
        raise ParseFailure(reply, str(exc)) from None
    if kind == "finish":
        return Finish()
    raise ParseFailure(reply, f"unknown action {kind!r}")


# --- URLs and exclusion ------------------------------------------------------


def normalize_url(url: str) -> str:
    """Case-fold scheme and host, drop the fragment and any trailing slash."""
    parts = urlsplit(url.strip())
    path = parts.path.rstrip("/")
    return urlunsplit((parts.scheme.lower(), parts.netloc.lower(), path, parts.query, ""))


def same_source(a: str, b: str) -> bool:
    return normalize_url(a) == normalize_url(b)


_URL = re.compile(r"https?://[^\s<>()\"'\]]+", re.IGNORECASE)


def redact_url(text: str, excluded: str) -> str:
    """Replace every occurrence of ``excluded`` (any normalized variant) in ``text``."""
    if not excluded:
        return text
    target = normalize_url(excluded)

    def sub(m: re.Match[str]) -> str:
        raw = m.group(0)
        trimmed = raw.rstrip(".,;:!?")
        if normalize_url(trimmed) == target:
            return EXCLUDED_MARK + raw[len(trimmed):]
        return raw

    text = _URL.sub(sub, text)
    # Scheme-less mentions such as "github.com/org/repo/issues/1".
    bare = target.split("://", 1)[-1]
    if bare:
        text = re.sub(re.escape(bare) + r"(?![0-9A-Za-z_])", EXCLUDED_MARK, text, flags=re.IGNORECASE)
    return text


@dataclass(frozen=True)
class SearchResult:
    title: str
    url: str
    snippet: str

    def to_dict(self) -> dict[str, str]:
        return {"title": self.title, "url": self.url, "snippet": self.snippet}


class SearchClient(Protocol):
    def search(self, query: str) -> list[SearchResult]:
        ...


class Fetcher(Protocol):
    def fetch(self, url: str) -> str:
        ...


Summarizer = Callable[[str, str, str], str]
"""(issue title, url, page text) -> compressed digest."""


def search(client: SearchClient, query: str, exclude_url: str) -> list[SearchResult]:
    if not query.strip():
        raise ValueError("empty search query")
    results = client.search(query)
    if not exclude_url:
        return list(results)
    return [r for r in results if not same_source(r.url, exclude_url)]


class _TextExtractor(HTMLParser):
    _SKIP = {"script", "style", "noscript", "template", "head", "svg"}
    _BLOCK = {"p", "div", "br", "li", "tr", "h1", "h2", "h3", "h4", "h5", "h6", "pre", "section", "article"}

    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self._skip_depth = 0

    def handle_starttag(self, tag: str, attrs: Any) -> None:
        if tag in self._SKIP:
            self._skip_depth += 1
        elif tag in self._BLOCK:
            self.parts.append("\n")

    def handle_endtag(self, tag: str) -> None:
        if tag in self._SKIP and self._skip_depth:
            self._skip_depth -= 1
        elif tag in self._BLOCK:
            self.parts.append("\n")

    def handle_data(self, data: str) -> None:
        if not self._skip_depth:
            self.parts.append(data)


def html_to_text(html: str) -> str:
    parser = _TextExtractor()
    parser.feed(html)
    parser.close()
    lines = (re.sub(r"[ \t\r\f\v]+", " ", line).strip() for line in "".join(parser.parts).split("\n"))
    return "\n".join(line for line in lines if line)


class EvidenceKind(str, Enum):
    SEARCH_RESULT = "search_result"
    PAGE_DIGEST = "page_digest"


@dataclass(frozen=True)
class EvidenceItem:
    kind: EvidenceKind
    source_url: str
    text: str
    turn: int

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "source_url": self.source_url, "text": self.text, "turn": self.turn}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvidenceItem":
        return cls(EvidenceKind(d["kind"]), d["source_url"], d["text"], int(d["turn"]))


def visit_and_compress(
    fetcher: Fetcher,
    url: str,
    summarizer: Summarizer,
    *,
    exclude_url: str = "",
    title: str = "",
    turn: int = 0,
    max_chars: int = PAGE_CHAR_CAP,
) -> EvidenceItem:
    if exclude_url and same_source(url, exclude_url):
        raise ExcludedSource(f"excluded source: {url}")
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https") or not parts.netloc:
        raise FetchError(f"not a fetchable url: {url!r}")
    page = html_to_text(fetcher.fetch(url))[:max_chars]
    try:
        digest = summarizer(title, url, page)
    except SummarizerError:
        raise
    except (ProviderError, BudgetExceeded) as exc:
        raise SummarizerError(str(exc)) from exc
    return EvidenceItem(EvidenceKind.PAGE_DIGEST, url, redact_url(digest, exclude_url), turn)


# --- trace and loop ----------------------------------------------------------


class Termination(str, Enum):
    FINISH = "finish"
    TURN_BUDGET = "turn_budget"
    SEARCH_BUDGET = "search_budget"
    FAULT = "fault"


@dataclass
class AgentTrace:
    report_id: int
    actions: list[tuple[int, AgentAction]] = field(default_factory=list)
    evidence: list[EvidenceItem] = field(default_factory=list)
    faults: list[tuple[int, str]] = field(default_factory=list)
    turns: int = 0
    terminated_by: Termination | None = None

    @property
    def searches(self) -> int:
        return sum(isinstance(a, Search) for _, a in self.actions)

    @property
    def visits(self) -> int:
        return sum(isinstance(a, Visit) for _, a in self.actions)

    def to_dict(self) -> dict[str, Any]:
        return {
            "report_id": self.report_id,
            "actions": [{"turn": t, **a.to_dict()} for t, a in self.actions],
            "evidence": [e.to_dict() for e in self.evidence],
            "faults": [{"turn": t, "message": m} for t, m in self.faults],
            "turns": self.turns,
            "terminated_by": self.terminated_by.value if self.terminated_by else None,
        }

    def context(self) -> RetrievedContext:
        items = tuple(ContextItem(e.source_url, "web", e.text, 0.0, None) for e in self.evidence)
        return RetrievedContext(self.report_id, items, {"terminated_by": self.terminated_by.value if self.terminated_by else None})


Orchestrator = Callable[[str, str], str]
"""(system prompt, user prompt) -> raw orchestrator reply."""


def gateway_orchestrator(gateway: Gateway) -> Orchestrator:
    def ask(system: str, user: str) -> str:
        return gateway.ask(Role.ORCHESTRATOR, system, user, json_mode=True).text

    return ask


def gateway_summarizer(gateway: Gateway) -> Summarizer:
    def summarize(title: str, url: str, page: str) -> str:
        if not page.strip():
            raise SummarizerError(f"no text on {url}")
        return gateway.ask(
            Role.SUMMARIZER, load_template("summarizer_system"), render("summarizer_user", title=title, url=url, page=page)
        ).text

    return summarize


def research_brief(report: BugReport) -> str:
    return render(
        "agent_brief", created_at=format_timestamp(report.created_at), title=report.title, body=report.body
    )


def _format_results(query: str, results: list[SearchResult]) -> str:
    lines = [f"Web results for: {query}"]
    for i, r in enumerate(results, 1):
        lines.append(f"{i}. {r.title} <{r.url}>\n   {r.snippet}")
    return "\n".join(lines)


def run_agent(
    report: BugReport,
    orchestrator: Orchestrator,
    search_client: SearchClient,
    budget: AgentBudget | None = None,
    *,
    fetcher: Fetcher | None = None,
    summarizer: Summarizer | None = None,
) -> tuple[RetrievedContext, AgentTrace]:
    """Run the reason-search-observe loop for one report under hard budgets.

    Tool faults are recorded and never raised. An unrecoverable orchestrator
    call raises OrchestratorError.
    """
    budget = budget or AgentBudget()
    canonical = report.url
    trace = AgentTrace(report_id=report.id)
    system = render(
        "agent_system",
        max_searches=budget.max_searches,
        max_visits=budget.max_page_visits,
        max_turns=budget.max_turns,
    )
    transcript: list[str] = [research_brief(report)]
    malformed = 0

    def note(turn: int, message: str) -> None:
        message = redact_url(message, canonical)
        trace.faults.append((turn, message))
        transcript.append(f"[turn {turn}] tool error: {message}")

    while True:
        if trace.turns >= budget.max_turns:
            trace.terminated_by = Termination.TURN_BUDGET
            break
        trace.turns += 1
        turn = trace.turns
        try:
            reply = orchestrator(system, "\n\n".join(transcript))
        except BudgetExceeded:
            raise
        except Exception as exc:
            raise OrchestratorError(f"report {report.id}, turn {turn}: {exc}") from exc
        try:
            action = parse_action(reply)
        except ParseFailure as exc:
            malformed += 1
            trace.faults.append((turn, f"malformed action: {exc}"))
            if malformed >= 2:
                trace.terminated_by = Termination.FAULT
                break
            transcript.append(load_template("agent_reminder"))
            continue
        malformed = 0

        if isinstance(action, Finish):
            trace.actions.append((turn, action))
            trace.terminated_by = Termination.FINISH
            break

        if isinstance(action, Search):
            if trace.searches >= budget.max_searches:
                trace.terminated_by = Termination.SEARCH_BUDGET
                break
            action = Search(redact_url(action.query, canonical))
            trace.actions.append((turn, action))
            try:
                results = search(search_client, action.query, canonical)
            except (SearchProviderError, httpx.HTTPError, ValueError) as exc:
                note(turn, f"search failed: {exc}")
                continue
            results = [SearchResult(redact_url(r.title, canonical), r.url, redact_url(r.snippet, canonical)) for r in results]
            block = _format_results(action.query, results)
            transcript.append(f"[turn {turn}] {block}")
            if results:
                trace.evidence.append(EvidenceItem(EvidenceKind.SEARCH_RESULT, f"search:{action.query}", block, turn))
            continue

        # Visit
        if trace.visits >= budget.max_page_visits:
            note(turn, "page visit budget exhausted")
            continue
        trace.actions.append((turn, Visit(redact_url(action.url, canonical))))
        if fetcher is None or summarizer is None:
            note(turn, "page visits are not available")
            continue
        try:
            item = visit_and_compress(
                fetcher, action.url, summarizer, exclude_url=canonical, title=report.title, turn=turn
            )
        except ExcludedSource:
            note(turn, "excluded source")
            continue
        except (FetchError, SummarizerError, httpx.HTTPError) as exc:
            note(turn, f"visit failed: {exc}")
            continue
        trace.evidence.append(item)
        transcript.append(f"[turn {turn}] digest of {item.source_url}:\n{item.text}")

    return trace.context(), trace


def save_trace(trace: AgentTrace, directory: str | os.PathLike) -> Path:
    path = Path(directory) / f"{trace.report_id}.json"
    write_json(path, trace.to_dict())
    return path


# --- live clients and record/replay -------------------------------------------


class SerperClient:
    """Web search through the Serper API."""

    def __init__(
        self,
        api_key: str | None = None,
        http: httpx.Client | None = None,
        endpoint: str = "https://google.serper.dev/search",
        num_results: int = 10,
        max_retries: int = 3,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.api_key = api_key if api_key is not None else os.environ.get(SEARCH_KEY_ENV)
        self.http = http or httpx.Client(timeout=30.0)
        self.endpoint = endpoint
        self.num_results = num_results
        self.max_retries = max_retries
        self._sleep = sleep

    def search(self, query: str) -> list[SearchResult]:
        if not self.api_key:
            raise SearchProviderError(f"{SEARCH_KEY_ENV} is not set")
        for attempt in range(self.max_retries + 1):
            try:
                r = self.http.post(
                    self.endpoint,
                    json={"q": query, "num": self.num_results},
                    headers={"X-API-KEY": self.api_key, "Content-Type": "application/json"},
                )
            except httpx.HTTPError as exc:
                err = SearchProviderError(str(exc))
            else:
                if r.status_code < 400:
                    organic = r.json().get("organic") or []
                    return [SearchResult(o.get("title", ""), o.get("link", ""), o.get("snippet", "")) for o in organic if o.get("link")]
                err = SearchProviderError(f"{r.status_code}: {r.text[:200]}")
                if r.status_code not in (429, 500, 502, 503, 504):
                    raise err
            if attempt == self.max_retries:
                raise err
            self._sleep(backoff_delay(attempt))
        raise AssertionError("unreachable")


class HttpFetcher:
    def __init__(self, http: httpx.Client | None = None, timeout: float = 30.0, max_bytes: int = 5_000_000):
        self.http = http or httpx.Client(timeout=timeout, follow_redirects=True, headers={"User-Agent": USER_AGENT})
        self.max_bytes = max_bytes

    def fetch(self, url: str) -> str:
        try:
            r = self.http.get(url)
        except httpx.HTTPError as exc:
            raise FetchError(f"{url}: {exc}") from exc
        if r.status_code >= 400:
            raise FetchError(f"{url}: HTTP {r.status_code}")
        ctype = r.headers.get("content-type", "text/html")
        if not ctype.startswith(("text/", "application/xhtml")):
            raise FetchError(f"{url}: unsupported content type {ctype}")
        return r.text[: self.max_bytes]


class Cassette:
    """Record/replay store for search results and fetched pages, keyed by request."""

    def __init__(self, path: str | os.PathLike, mode: str = "replay"):
        if mode not in ("record", "replay"):
            raise ValueError("mode must be 'record' or 'replay'")
        self.path = Path(path)
        self.mode = mode
        self.entries: dict[str, Any] = read_json(self.path) if self.path.exists() else {}

    @staticmethod
    def key(kind: str, arg: str) -> str:
        return hashlib.sha256(f"{kind}\0{arg}".encode("utf-8")).hexdigest()

    def lookup(self, kind: str, arg: str, produce: Callable[[], Any], error: type[Exception]) -> Any:
        k = self.key(kind, arg)
        if k in self.entries:
            return self.entries[k]["value"]
        if self.mode == "replay":
            raise error(f"no recorded {kind} for {arg!r}")
        value = produce()
        self.entries[k] = {"kind": kind, "arg": arg, "value": value}
        write_json(self.path, self.entries)
        return value


class CassetteSearchClient:
    def __init__(self, cassette: Cassette, inner: SearchClient | None = None):
        self.cassette = cassette
        self.inner = inner

    def search(self, query: str) -> list[SearchResult]:
        def produce() -> list[dict[str, str]]:
            if self.inner is None:
                raise SearchProviderError("no live search client configured")
            return [r.to_dict() for r in self.inner.search(query)]

        rows = self.cassette.lookup("search", query, produce, SearchProviderError)
        return [SearchResult(**r) for r in rows]


class CassetteFetcher:
    def __init__(self, cassette: Cassette, inner: Fetcher | None = None):
        self.cassette = cassette
        self.inner = inner

    def fetch(self, url: str) -> str:
        def produce() -> str:
            if self.inner is None:
                raise FetchError("no live fetcher configured")
            return self.inner.fetch(url)

        return self.cassette.lookup("page", url, produce, FetchError)
