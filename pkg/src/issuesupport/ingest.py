"""Mining closed issues from a GitHub-compatible REST API and persisting the corpus."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

import httpx

from .errors import AuthError, RateLimited, TransportError
from .models import BugReport, Comment, decode, parse_timestamp
from .ratelimit import RateLimiter, backoff_delay
from .storage import iter_jsonl, write_jsonl

log = logging.getLogger(__name__)

TOKEN_ENV = "ISSUE_API_TOKEN"

# Labels the Brave project treats as "invalid" closures.
DEFAULT_INVALID_LABELS: frozenset[str] = frozenset(
    {
        "closed/duplicate",
        "closed/invalid",
        "closed/stale",
        "closed/not-actionable",
        "closed/wontfix",
        "closed/works-for-me",
        "closed/no-milestone",
        "question",
        "support",
        "closed/workaround",
        "closed/fixable-by-custom-rules",
    }
)


def invalid_label_set(labels: Iterable[str]) -> frozenset[str]:
    out = frozenset(l.strip() for l in labels if l.strip())
    if not out:
        raise ValueError("invalid label set must not be empty")
    return out


@dataclass(frozen=True)
class IssueSourceConfig:
    repo_owner: str
    repo_name: str
    api_base_url: str = "https://api.github.com"
    auth_token: str | None = field(default=None, repr=False)
    page_size: int = 100
    request_timeout: float = 30.0
    max_retries: int = 5
    parallelism: int = 1
    exclude_pull_requests: bool = True

    def __post_init__(self) -> None:
        if not 1 <= self.page_size <= 100:
            raise ValueError("page_size must be in [1, 100]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")

    @classmethod
    def from_env(cls, repo_owner: str, repo_name: str, **kwargs: Any) -> "IssueSourceConfig":
        return cls(repo_owner, repo_name, auth_token=os.environ.get(TOKEN_ENV), **kwargs)


class IssueTrackerClient:
    """Thin REST client; every GET goes through the retry loop and the shared limiter."""

    def __init__(
        self,
        cfg: IssueSourceConfig,
        http: httpx.Client | None = None,
        limiter: RateLimiter | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        headers = {"Accept": "application/vnd.github+json", "User-Agent": "issuesupport"}
        if cfg.auth_token:
            headers["Authorization"] = f"Bearer {cfg.auth_token}"
        self._owns_http = http is None
        self.http = http or httpx.Client(timeout=cfg.request_timeout)
        self._headers = headers
        self.limiter = limiter or RateLimiter(max_in_flight=max(cfg.parallelism, 1))
        self._sleep = sleep
        self.list_calls = 0

    @property
    def repo_url(self) -> str:
        return f"{self.cfg.api_base_url.rstrip('/')}/repos/{self.cfg.repo_owner}/{self.cfg.repo_name}"

    def close(self) -> None:
        if self._owns_http:
            self.http.close()

    def get(self, url: str, params: dict[str, Any] | None = None) -> httpx.Response:
        for attempt in range(self.cfg.max_retries + 1):
            retry_after: float | None = None
            try:
                with self.limiter.slot():
                    resp = self.http.get(url, params=params, headers=self._headers, timeout=self.cfg.request_timeout)
            except httpx.TimeoutException as exc:
                err: Exception = TransportError(f"timeout: {exc}")
            except httpx.TransportError as exc:
                err = TransportError(str(exc))
            else:
                status = resp.status_code
                if status < 400:
                    return resp
                if status == 401:
                    raise AuthError(f"401 from {url}")
                if status in (403, 429):
                    retry_after = _retry_after(resp)
                    if status == 403 and retry_after is None and resp.headers.get("x-ratelimit-remaining") != "0":
                        raise AuthError(f"403 from {url}")
                    err = RateLimited(retry_after)
                elif status >= 500:
                    err = TransportError(f"{status} from {url}")
                else:
                    raise TransportError(f"{status} from {url}: {resp.text[:200]}")
            if attempt == self.cfg.max_retries:
                raise err
            delay = backoff_delay(attempt)
            if retry_after is not None:
                delay = max(delay, retry_after)
            log.debug("retrying %s in %.2fs (%s)", url, delay, err)
            self._sleep(delay)
        raise AssertionError("unreachable")

    def iter_issue_pages(self) -> Iterator[list[dict[str, Any]]]:
        """Yield raw issue pages until the listing is exhausted."""
        url: str | None = f"{self.repo_url}/issues"
        params: dict[str, Any] | None = {
            "state": "closed",
            "per_page": self.cfg.page_size,
            "sort": "created",
            "direction": "asc",
            "page": 1,
        }
        page_no = 1
        while url:
            resp = self.get(url, params)
            self.list_calls += 1
            items = resp.json()
            if not isinstance(items, list):
                raise TransportError(f"unexpected listing payload from {url}")
            if items:
                yield items
            links = resp.links if "link" in resp.headers else None
            if links is not None:
                url = links.get("next", {}).get("url")
                params = None
            elif len(items) < self.cfg.page_size:
                url = None
            else:
                page_no += 1
                params = dict(params or {}, page=page_no)

    def list_comments(self, issue: dict[str, Any]) -> list[dict[str, Any]]:
        if not issue.get("comments"):
            return []
        url: str | None = issue.get("comments_url") or f"{self.repo_url}/issues/{issue['number']}/comments"
        params: dict[str, Any] | None = {"per_page": 100, "page": 1}
        out: list[dict[str, Any]] = []
        page_no = 1
        while url:
            resp = self.get(url, params)
            items = resp.json()
            out.extend(items)
            if "link" in resp.headers:
                url = resp.links.get("next", {}).get("url")
                params = None
            elif len(items) < 100:
                url = None
            else:
                page_no += 1
                params = {"per_page": 100, "page": page_no}
        return out


def _retry_after(resp: httpx.Response) -> float | None:
    if "retry-after" in resp.headers:
        try:
            return float(resp.headers["retry-after"])
        except ValueError:
            return None
    if resp.headers.get("x-ratelimit-remaining") == "0" and "x-ratelimit-reset" in resp.headers:
        try:
            return max(0.0, float(resp.headers["x-ratelimit-reset"]) - time.time())
        except ValueError:
            return None
    return None


def _reactions(raw: dict[str, Any] | None) -> dict[str, int]:
    if not raw:
        return {}
    return {k: int(v) for k, v in raw.items() if k not in ("url", "total_count") and isinstance(v, int) and v > 0}


def issue_to_report(issue: dict[str, Any], comments: list[dict[str, Any]]) -> BugReport:
    parsed = [
        Comment(
            id=int(c["id"]),
            author=(c.get("user") or {}).get("login", ""),
            body=c.get("body") or "",
            created_at=parse_timestamp(c["created_at"]),
            reactions=_reactions(c.get("reactions")),
        )
        for c in comments
    ]
    parsed.sort(key=lambda c: (c.created_at, c.id))
    return BugReport(
        id=int(issue["number"]),
        title=issue.get("title") or "",
        body=issue.get("body") or "",
        labels=frozenset(l["name"] if isinstance(l, dict) else str(l) for l in issue.get("labels") or ()),
        created_at=parse_timestamp(issue["created_at"]),
        closed_at=parse_timestamp(issue["closed_at"]) if issue.get("closed_at") else None,
        comments=tuple(parsed),
        url=issue.get("html_url") or "",
    )


def fetch_closed_issues(
    cfg: IssueSourceConfig,
    cutoff: datetime,
    *,
    client: IssueTrackerClient | None = None,
) -> Iterator[BugReport]:
    """Stream every closed issue created strictly before ``cutoff``, with comments.

    Pull requests are skipped when ``cfg.exclude_pull_requests`` is set.
    """
    client = client or IssueTrackerClient(cfg)
    seen: set[int] = set()

    def wanted(issue: dict[str, Any]) -> bool:
        if cfg.exclude_pull_requests and "pull_request" in issue:
            return False
        if issue.get("state", "closed") != "closed":
            return False
        return parse_timestamp(issue["created_at"]) < cutoff

    def build(issue: dict[str, Any]) -> BugReport:
        return issue_to_report(issue, client.list_comments(issue))

    with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
        for page in client.iter_issue_pages():
            batch = []
            for issue in page:
                number = int(issue["number"])
                if number in seen or not wanted(issue):
                    continue
                seen.add(number)
                batch.append(issue)
            yield from pool.map(build, batch)


def is_invalid_by_labels(report: BugReport, invalid_labels: Iterable[str] = DEFAULT_INVALID_LABELS) -> bool:
    return not report.labels.isdisjoint(invalid_labels)


def save_corpus(reports: Iterable[BugReport], path: str | os.PathLike) -> int:
    return write_jsonl(path, (r.to_dict() for r in reports))


def load_corpus(path: str | os.PathLike) -> list[BugReport]:
    return [decode(BugReport, obj, line_no) for line_no, obj in iter_jsonl(Path(path))]
