"""Shared request budget: a token-bucket rate limiter plus an in-flight bound."""

from __future__ import annotations

import random
import threading
import time
from contextlib import contextmanager
from typing import Callable, Iterator


class RateLimiter:
    """Token bucket refilled at ``per_minute`` tokens per minute.

    ``per_minute=None`` disables throttling but still bounds concurrency.
    """

    def __init__(
        self,
        per_minute: float | None = None,
        max_in_flight: int = 8,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if per_minute is not None and per_minute <= 0:
            raise ValueError("per_minute must be positive")
        self.per_minute = per_minute
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        capacity = per_minute if per_minute is not None else 0.0
        self._capacity = max(1.0, capacity / 6.0) if per_minute else 0.0
        self._tokens = self._capacity
        self._last = clock()

    def acquire(self) -> None:
        if self.per_minute is None:
            return
        rate = self.per_minute / 60.0
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self._capacity, self._tokens + (now - self._last) * rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / rate
            self._sleep(wait)

    @contextmanager
    def slot(self) -> Iterator[None]:
        with self._slots:
            self.acquire()
            yield


def backoff_delay(attempt: int, base: float = 0.5, cap: float = 30.0, rng: random.Random | None = None) -> float:
    """Exponential backoff with jitter for retry number ``attempt`` (0-based)."""
    ceiling = min(cap, base * (2 ** attempt))
    r = rng.random() if rng is not None else random.random()
    return ceiling * (0.5 + 0.5 * r)
