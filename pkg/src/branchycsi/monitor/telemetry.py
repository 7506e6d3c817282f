"""HTTP delivery of telemetry records with retry, backoff and a bounded buffer."""

from __future__ import annotations

import collections
import logging
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional
from urllib.parse import urlparse

import requests

from ..errors import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    initial_backoff: float = 0.2
    factor: float = 2.0
    max_backoff: float = 5.0
    timeout: float = 5.0
    max_reconnects: int = 5

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ConfigurationError("retry max_attempts must be >= 1")
        if self.initial_backoff < 0 or self.factor < 1 or self.timeout <= 0:
            raise ConfigurationError("retry backoff must be >= 0, factor >= 1, timeout > 0")

    def backoff(self, attempt: int) -> float:
        """Delay after failed attempt number ``attempt`` (1-based)."""
        return min(self.max_backoff, self.initial_backoff * self.factor ** (attempt - 1))


@dataclass(frozen=True)
class DeliveryStatus:
    delivered: bool
    attempts: int
    status_code: Optional[int] = None
    error: str = ""


def check_endpoint(endpoint: str) -> None:
    parts = urlparse(endpoint)
    if parts.scheme not in ("http", "https") or not parts.netloc:
        raise ConfigurationError(f"endpoint must be an http(s) URL, got {endpoint!r}")


def post_telemetry(record: dict, endpoint: str, auth: Optional[str] = None, retry: RetryPolicy = RetryPolicy(),
                   session: Optional[requests.Session] = None,
                   sleep: Callable[[float], None] = time.sleep,
                   should_stop: Callable[[], bool] = lambda: False) -> DeliveryStatus:
    """POST ``record`` as JSON; 2xx is delivered, anything else is retried with exponential backoff."""
    check_endpoint(endpoint)
    headers = {"Authorization": f"Bearer {auth}"} if auth else {}
    poster = session.post if session is not None else requests.post
    code, error = None, ""
    for attempt in range(1, retry.max_attempts + 1):
        try:
            resp = poster(endpoint, json=record, headers=headers, timeout=retry.timeout)
            code = resp.status_code
            if 200 <= code < 300:
                return DeliveryStatus(True, attempt, code)
            error = f"HTTP {code}"
        except requests.RequestException as exc:
            code, error = None, f"{type(exc).__name__}: {exc}"
        if attempt < retry.max_attempts and not should_stop():
            sleep(retry.backoff(attempt))
    return DeliveryStatus(False, attempt, code, error)


class TelemetryBuffer:
    """Bounded FIFO that evicts the oldest record when full and counts evictions."""

    def __init__(self, capacity: int = 100) -> None:
        if capacity < 1:
            raise ConfigurationError("buffer capacity must be >= 1")
        self.capacity = capacity
        self._items: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self.dropped = 0
        self.pushed = 0

    def push(self, record: dict) -> None:
        with self._cond:
            if len(self._items) >= self.capacity:
                self._items.popleft()
                self.dropped += 1
            self._items.append(record)
            self.pushed += 1
            self._cond.notify()

    def pop(self, timeout: Optional[float] = None) -> Optional[dict]:
        with self._cond:
            if not self._items:
                self._cond.wait(timeout)
            return self._items.popleft() if self._items else None

    def drain_remaining(self) -> list:
        with self._cond:
            items = list(self._items)
            self._items.clear()
            return items

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


class TelemetryDispatcher:
    """Background sender: records go into a bounded buffer and are posted in order.

    Accounting: ``pushed == delivered + dead_letter + dropped + pending``.
    """

    def __init__(self, endpoint: Optional[str], auth: Optional[str] = None, retry: RetryPolicy = RetryPolicy(),
                 capacity: int = 100, sink: Optional[Callable[[dict], None]] = None) -> None:
        if endpoint:
            check_endpoint(endpoint)
        self.endpoint, self.auth, self.retry = endpoint, auth, retry
        self.buffer = TelemetryBuffer(capacity)
        self.sink = sink
        self.delivered = 0
        self.dead_letter = 0
        self._closing = threading.Event()
        self._abort = threading.Event()
        self._session = requests.Session()
        self._thread = threading.Thread(target=self._run, name="telemetry", daemon=True)

    def start(self) -> "TelemetryDispatcher":
        self._thread.start()
        return self

    def submit(self, record: dict) -> None:
        if self.sink is not None:
            self.sink(record)
        self.buffer.push(record)

    @property
    def dropped(self) -> int:
        return self.buffer.dropped

    def _deliver(self, record: dict) -> None:
        if not self.endpoint:
            self.delivered += 1
            return
        status = post_telemetry(record, self.endpoint, self.auth, self.retry, self._session,
                                sleep=self._abort.wait, should_stop=self._abort.is_set)
        if status.delivered:
            self.delivered += 1
        else:
            self.dead_letter += 1
            logger.warning("telemetry for window %s undeliverable: %s", record.get("window_id"), status.error)

    def _run(self) -> None:
        while True:
            record = self.buffer.pop(timeout=0.05)
            if record is not None:
                self._deliver(record)
            elif self._closing.is_set():
                return

    def close(self, timeout: float = 10.0) -> None:
        """Drain the buffer (up to ``timeout`` seconds); leftovers are counted as dropped."""
        self._closing.set()
        if self._thread.is_alive():
            self._thread.join(timeout)
        if self._thread.is_alive():
            self._abort.set()
            self._thread.join()
        leftovers = self.buffer.drain_remaining()
        self.buffer.dropped += len(leftovers)
        self._session.close()
