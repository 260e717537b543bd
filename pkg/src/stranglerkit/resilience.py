"""Per-service circuit breaker with a last-good-result cache.

The transition rules live in two pure functions, ``admit`` and
``transition``; ``CircuitBreaker`` only adds locking, the clock, the cache and
counters around them.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Callable, Hashable, Union

from stranglerkit.errors import UpstreamFailure

SUCCESS = "success"
FAILURE = "failure"
LIVE = "live"
CACHED = "cached"


@dataclass(frozen=True)
class BreakerConfig:
    failure_threshold: int = 5
    cooldown: float = 30.0
    call_timeout: float = 2.0
    cache_capacity: int = 1024

    def __post_init__(self):
        if self.failure_threshold < 1:
            raise ValueError("failure_threshold must be >= 1")
        if self.cooldown < 0 or self.call_timeout <= 0 or self.cache_capacity < 1:
            raise ValueError("cooldown, call_timeout and cache_capacity must be positive")


@dataclass(frozen=True)
class Closed:
    failures: int = 0

    name = "closed"


@dataclass(frozen=True)
class Open:
    opened_at: float

    name = "open"


@dataclass(frozen=True)
class HalfOpen:
    name = "half-open"


CircuitState = Union[Closed, Open, HalfOpen]


def admit(state: CircuitState, now: float, config: BreakerConfig) -> tuple[CircuitState, bool]:
    """Decide whether a call may reach the upstream.

    An open circuit whose cooldown has elapsed becomes half-open and admits
    the caller as its single probe; while half-open everyone else is refused.
    """
    if isinstance(state, Closed):
        return state, True
    if isinstance(state, Open) and now - state.opened_at >= config.cooldown:
        return HalfOpen(), True
    return state, False


def transition(state: CircuitState, outcome: str, now: float, config: BreakerConfig) -> CircuitState:
    if outcome not in (SUCCESS, FAILURE):
        raise ValueError(f"unknown outcome {outcome!r}")
    if isinstance(state, Open):
        # a straggler that was admitted before the circuit opened
        return state
    if outcome == SUCCESS:
        return Closed(0)
    if isinstance(state, HalfOpen):
        return Open(now)
    failures = state.failures + 1
    return Open(now) if failures >= config.failure_threshold else Closed(failures)


def request_digest(request: Any) -> str:
    if isinstance(request, bytes):
        raw = request
    elif isinstance(request, str):
        raw = request.encode()
    else:
        raw = json.dumps(request, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(raw).hexdigest()


class ResultCache:
    """Thread-safe LRU map from (service, request digest) to the last live response."""

    def __init__(self, capacity: int = 1024):
        self.capacity = capacity
        self._items: OrderedDict[Hashable, Any] = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key: Hashable, default=None):
        with self._lock:
            if key not in self._items:
                return default
            self._items.move_to_end(key)
            return self._items[key]

    def __contains__(self, key: Hashable) -> bool:
        with self._lock:
            return key in self._items

    def put(self, key: Hashable, value: Any) -> None:
        with self._lock:
            self._items[key] = value
            self._items.move_to_end(key)
            while len(self._items) > self.capacity:
                self._items.popitem(last=False)

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)


@dataclass(frozen=True)
class BreakerResult:
    response: Any
    provenance: str


_MISSING = object()


class CircuitBreaker:
    def __init__(self, config: BreakerConfig | None = None, clock: Callable[[], float] = time.monotonic):
        self.config = config or BreakerConfig()
        self.clock = clock
        self.cache = ResultCache(self.config.cache_capacity)
        self._states: dict[str, CircuitState] = {}
        self._stats: dict[str, dict[str, int]] = {}
        self._lock = threading.Lock()

    def state(self, service: str) -> CircuitState:
        with self._lock:
            return self._states.get(service, Closed(0))

    def _bump(self, service: str, counter: str) -> None:
        stats = self._stats.setdefault(service, dict.fromkeys(("live", "failures", "rejected", "cache_hits"), 0))
        stats[counter] += 1

    def record_outcome(self, service: str, outcome: str) -> CircuitState:
        with self._lock:
            new = transition(self._states.get(service, Closed(0)), outcome, self.clock(), self.config)
            self._states[service] = new
            self._bump(service, "live" if outcome == SUCCESS else "failures")
            return new

    def _fallback(self, service: str, key: str, reason: str) -> BreakerResult:
        cached = self.cache.get((service, key), _MISSING)
        if cached is _MISSING:
            raise UpstreamFailure(f"{service}: {reason} and no cached result")
        with self._lock:
            self._bump(service, "cache_hits")
        return BreakerResult(cached, CACHED)

    def call_with_breaker(self, service: str, request: Any, upstream: Callable[[Any], Any]) -> BreakerResult:
        """Call ``upstream(request)`` unless the circuit for ``service`` is open.

        Any exception, or a reply that took longer than ``call_timeout`` on the
        breaker's clock, is a failure. Failures and refused calls fall back to
        the cached result for the same request when one exists.
        """
        key = request_digest(request)
        with self._lock:
            state, admitted = admit(self._states.get(service, Closed(0)), self.clock(), self.config)
            self._states[service] = state
            if not admitted:
                self._bump(service, "rejected")
        if not admitted:
            return self._fallback(service, key, "circuit open")
        started = self.clock()
        try:
            response = upstream(request)
        except Exception as exc:  # noqa: BLE001 - any upstream error trips the breaker
            self.record_outcome(service, FAILURE)
            return self._fallback(service, key, f"upstream failed ({exc})")
        if self.clock() - started > self.config.call_timeout:
            self.record_outcome(service, FAILURE)
            return self._fallback(service, key, "upstream timed out")
        self.record_outcome(service, SUCCESS)
        self.cache.put((service, key), response)
        return BreakerResult(response, LIVE)

    def metrics(self) -> dict[str, dict]:
        with self._lock:
            out = {}
            for service in sorted(set(self._states) | set(self._stats)):
                state = self._states.get(service, Closed(0))
                out[service] = {
                    "state": state.name,
                    "consecutive_failures": state.failures if isinstance(state, Closed) else None,
                    **self._stats.get(service, {}),
                }
            return out
