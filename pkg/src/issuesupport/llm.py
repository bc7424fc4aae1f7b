"""Chat-completion gateway over OpenAI-compatible endpoints, plus test doubles."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Callable, Iterable, Protocol

import httpx

from .errors import BudgetExceeded, ProviderError, ScriptExhausted
from .ratelimit import RateLimiter, backoff_delay

log = logging.getLogger(__name__)

API_BASE_ENV = "LLM_API_BASE"
API_KEY_ENV = "LLM_API_KEY"

RETRYABLE_STATUSES = frozenset({408, 409, 429, 500, 502, 503, 504})


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    system_prompt: str
    user_prompt: str
    # None leaves the provider's default temperature in effect.
    temperature: float | None = None
    max_tokens: int = 8192
    json_mode: bool = False

    def __post_init__(self) -> None:
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("prompts must be non-empty")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature is not None and self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: FinishReason = FinishReason.STOP
    usage: Usage = field(default_factory=Usage)


class Role(str, Enum):
    CLASSIFIER = "classifier"
    ORCHESTRATOR = "orchestrator"
    QUERY_GEN = "query_gen"
    SUMMARIZER = "summarizer"
    JUDGE = "judge"


@dataclass(frozen=True)
class RoleParams:
    role: Role
    model_id: str
    temperature: float | None
    max_tokens: int = 8192


def default_role_params(
    model_id: str,
    *,
    helper_model_id: str | None = None,
    judge_model_id: str | None = None,
    classifier_temperature: float | None = 0.2,
) -> dict[Role, RoleParams]:
    """Per-role generation settings.

    Orchestration runs at 0.7 and the final classifier at 0.2. Pass
    ``classifier_temperature=None`` for the plain (non-agentic) pipelines,
    which keep the provider default.
    """
    helper = helper_model_id or model_id
    return {
        Role.CLASSIFIER: RoleParams(Role.CLASSIFIER, model_id, classifier_temperature),
        Role.ORCHESTRATOR: RoleParams(Role.ORCHESTRATOR, model_id, 0.7),
        Role.QUERY_GEN: RoleParams(Role.QUERY_GEN, helper, None),
        Role.SUMMARIZER: RoleParams(Role.SUMMARIZER, helper, None),
        Role.JUDGE: RoleParams(Role.JUDGE, judge_model_id or model_id, None),
    }


class Provider(Protocol):
    name: str

    def send(self, request: ChatRequest) -> ChatResponse:
        """One wire call. Raise ProviderError with a status for HTTP failures."""


@dataclass
class RetryPolicy:
    max_attempts: int = 4
    base_delay: float = 1.0
    max_delay: float = 30.0
    sleep: Callable[[float], None] = time.sleep
    rng: random.Random | None = None


class TokenBudget:
    """Hard ceiling on total tokens spent through one gateway."""

    def __init__(self, max_total_tokens: int | None = None):
        self.max_total_tokens = max_total_tokens
        self.spent = 0
        self._lock = threading.Lock()

    def check(self) -> None:
        if self.max_total_tokens is not None and self.spent >= self.max_total_tokens:
            raise BudgetExceeded(f"token budget of {self.max_total_tokens} exhausted ({self.spent} spent)")

    def charge(self, usage: Usage) -> None:
        with self._lock:
            self.spent += usage.total


def complete(
    provider: Provider,
    request: ChatRequest,
    *,
    retry: RetryPolicy | None = None,
    budget: TokenBudget | None = None,
    limiter: RateLimiter | None = None,
) -> ChatResponse:
    """Send ``request`` with retries on transient failures (429/5xx/timeouts).

    Non-retryable statuses (400/401/403 and other 4xx) raise immediately.
    """
    retry = retry or RetryPolicy()
    for attempt in range(retry.max_attempts):
        if budget is not None:
            budget.check()
        try:
            if limiter is not None:
                with limiter.slot():
                    resp = provider.send(request)
            else:
                resp = provider.send(request)
        except ProviderError as exc:
            transient = exc.status is None or exc.status in RETRYABLE_STATUSES
            if not transient or attempt == retry.max_attempts - 1:
                raise
            delay = backoff_delay(attempt, retry.base_delay, retry.max_delay, retry.rng)
            log.warning("provider %s failed (%s); retry %d in %.1fs", provider.name, exc.status, attempt + 1, delay)
            retry.sleep(delay)
            continue
        if budget is not None:
            budget.charge(resp.usage)
        return resp
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class RequestRecord:
    """Provenance for one gateway call."""

    role: str
    model_id: str
    temperature: float | None
    max_tokens: int
    json_mode: bool
    started_at: str
    finished_at: str
    prompt_tokens: int
    completion_tokens: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class Gateway:
    """Role-aware front door: maps a role to its params and logs request metadata."""

    def __init__(
        self,
        provider: Provider,
        roles: dict[Role, RoleParams],
        *,
        retry: RetryPolicy | None = None,
        budget: TokenBudget | None = None,
        limiter: RateLimiter | None = None,
    ):
        self.provider = provider
        self.roles = roles
        self.retry = retry or RetryPolicy()
        self.budget = budget or TokenBudget()
        self.limiter = limiter
        self.records: list[RequestRecord] = []
        self._lock = threading.Lock()

    def ask(self, role: Role, system_prompt: str, user_prompt: str, *, json_mode: bool = False) -> ChatResponse:
        params = self.roles[role]
        request = ChatRequest(
            model_id=params.model_id,
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            temperature=params.temperature,
            max_tokens=params.max_tokens,
            json_mode=json_mode,
        )
        started = _now()
        resp = complete(self.provider, request, retry=self.retry, budget=self.budget, limiter=self.limiter)
        with self._lock:
            self.records.append(
                RequestRecord(
                    role=role.value,
                    model_id=params.model_id,
                    temperature=params.temperature,
                    max_tokens=params.max_tokens,
                    json_mode=json_mode,
                    started_at=started,
                    finished_at=_now(),
                    prompt_tokens=resp.usage.prompt_tokens,
                    completion_tokens=resp.usage.completion_tokens,
                )
            )
        return resp


# --- providers ---------------------------------------------------------------


class OpenAICompatProvider:
    """POSTs to ``{base_url}/chat/completions`` using the OpenAI wire format."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        *,
        http: httpx.Client | None = None,
        timeout: float = 120.0,
        supports_json_mode: bool = True,
    ):
        self.base_url = (base_url or os.environ.get(API_BASE_ENV) or "https://openrouter.ai/api/v1").rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.http = http or httpx.Client(timeout=timeout)
        self.supports_json_mode = supports_json_mode
        self.name = f"openai-compat:{self.base_url}"

    def payload(self, request: ChatRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "max_tokens": request.max_tokens,
        }
        if request.temperature is not None:
            body["temperature"] = request.temperature
        if request.json_mode and self.supports_json_mode:
            body["response_format"] = {"type": "json_object"}
        return body

    def send(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            r = self.http.post(f"{self.base_url}/chat/completions", json=self.payload(request), headers=headers)
        except httpx.TimeoutException as exc:
            raise ProviderError(None, f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise ProviderError(None, str(exc)) from exc
        if r.status_code >= 400:
            raise ProviderError(r.status_code, r.text)
        try:
            data = r.json()
            choice = data["choices"][0]
            text = choice["message"].get("content") or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(r.status_code, f"malformed completion payload: {r.text[:200]}") from exc
        reason = {"stop": FinishReason.STOP, "length": FinishReason.LENGTH}.get(
            choice.get("finish_reason") or "stop", FinishReason.ERROR
        )
        usage = data.get("usage") or {}
        return ChatResponse(
            text=text,
            finish_reason=reason,
            usage=Usage(int(usage.get("prompt_tokens") or 0), int(usage.get("completion_tokens") or 0)),
        )


@dataclass(frozen=True)
class Fault:
    """Scripted failure for :class:`ScriptedProvider`."""

    status: int | None = 500
    body: str = "scripted fault"


class ScriptedProvider:
    """Replays canned responses in FIFO order and records every request it receives.

    Script entries may be strings, ChatResponse objects, Fault markers, or
    callables taking the request and returning one of those.
    """

    name = "mock-scripted"

    def __init__(self, script: Iterable[Any]):
        self._script = list(script)
        self._pos = 0
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    @property
    def remaining(self) -> int:
        return len(self._script) - self._pos

    def send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests.append(request)
            if self._pos >= len(self._script):
                raise ScriptExhausted(f"script of {len(self._script)} entries exhausted")
            item = self._script[self._pos]
            self._pos += 1
        if callable(item) and not isinstance(item, (Fault, ChatResponse)):
            item = item(request)
        if isinstance(item, Fault):
            raise ProviderError(item.status, item.body)
        if isinstance(item, ChatResponse):
            return item
        return ChatResponse(text=str(item), usage=Usage(len(request.user_prompt) // 4, len(str(item)) // 4))


def mock_provider(script: Iterable[Any]) -> ScriptedProvider:
    return ScriptedProvider(script)


class EchoMockProvider:
    """Offline deterministic stand-in used by ``--model mock``.

    Responses are a pure function of the prompt text, so repeated runs are
    byte-identical. Classification requests get a JSON answer chosen by
    keyword cues, judge requests get a verdict, and anything else gets a
    short digest of the prompt.
    """

    name = "mock-echo"

    def __init__(self) -> None:
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    def send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests.append(request)
        from .mockbrain import respond

        text = respond(request.system_prompt, request.user_prompt)
        return ChatResponse(text=text, usage=Usage(len(request.user_prompt) // 4, len(text) // 4))


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def provider_for(model_id: str, **kwargs: Any) -> Provider:
    if model_id == "mock":
        return EchoMockProvider()
    return OpenAICompatProvider(**kwargs)


def dumps_request(request: ChatRequest) -> str:
    return json.dumps(asdict(request), sort_keys=True, ensure_ascii=False)
