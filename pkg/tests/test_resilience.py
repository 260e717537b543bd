from __future__ import annotations

import itertools
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import breaker_oracle
from stranglerkit.errors import UpstreamFailure
from stranglerkit.resilience import (
    CACHED,
    FAILURE,
    LIVE,
    SUCCESS,
    BreakerConfig,
    CircuitBreaker,
    Closed,
    HalfOpen,
    Open,
    ResultCache,
    request_digest,
    transition,
)


class Clock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


class Stub:
    def __init__(self):
        self.calls = 0
        self.next = SUCCESS

    def __call__(self, request):
        self.calls += 1
        if self.next == FAILURE:
            raise ConnectionError("boom")
        return f"reply-{self.calls}"


def encode(state):
    if isinstance(state, Closed):
        return ("C", state.failures)
    if isinstance(state, Open):
        return ("O", state.opened_at)
    return ("H",)


def test_defaults():
    cfg = BreakerConfig()
    assert (cfg.failure_threshold, cfg.cooldown, cfg.call_timeout, cfg.cache_capacity) == (5, 30.0, 2.0, 1024)


def test_success_resets_failures():
    cb, stub = CircuitBreaker(clock=Clock()), Stub()
    stub.next = FAILURE
    for _ in range(4):
        with pytest.raises(UpstreamFailure):
            cb.call_with_breaker("s", "r", stub)
    assert cb.state("s") == Closed(4)
    stub.next = SUCCESS
    assert cb.call_with_breaker("s", "r", stub).provenance == LIVE
    assert cb.state("s") == Closed(0)


def test_open_circuit_serves_cache_without_calling_upstream():
    clock, stub = Clock(), Stub()
    cb = CircuitBreaker(clock=clock)
    first = cb.call_with_breaker("s", "r", stub)
    stub.next = FAILURE
    for _ in range(5):
        assert cb.call_with_breaker("s", "r", stub).response == first.response
    assert isinstance(cb.state("s"), Open)
    calls = stub.calls
    clock.now = 29.9
    result = cb.call_with_breaker("s", "r", stub)
    assert (result.response, result.provenance) == (first.response, CACHED)
    assert stub.calls == calls
    with pytest.raises(UpstreamFailure):
        cb.call_with_breaker("s", "other-request", stub)
    assert stub.calls == calls


def test_transition_boundaries():
    cfg = BreakerConfig(failure_threshold=5)
    assert transition(Closed(4), FAILURE, 7.0, cfg) == Open(7.0)
    assert transition(HalfOpen(), SUCCESS, 1.0, cfg) == Closed(0)
    assert transition(HalfOpen(), FAILURE, 9.0, cfg) == Open(9.0)
    with pytest.raises(ValueError):
        transition(Closed(0), "maybe", 0.0, cfg)


def test_record_outcome_is_the_transition_used_by_calls():
    clock = Clock()
    cb = CircuitBreaker(BreakerConfig(failure_threshold=2), clock=clock)
    cb.record_outcome("s", FAILURE)
    assert cb.record_outcome("s", FAILURE) == Open(0.0)


def test_timeout_counts_as_failure_and_is_not_cached():
    clock = Clock()
    cb = CircuitBreaker(BreakerConfig(call_timeout=2.0), clock=clock)

    def slow(request):
        clock.now += 3.0
        return "late"

    with pytest.raises(UpstreamFailure, match="timed out"):
        cb.call_with_breaker("s", "r", slow)
    assert cb.state("s") == Closed(1)
    assert len(cb.cache) == 0


def test_lru_eviction():
    cache = ResultCache(capacity=2)
    cache.put("a", 1)
    cache.put("b", 2)
    cache.get("a")
    cache.put("c", 3)
    assert "a" in cache and "c" in cache and "b" not in cache


def test_request_digest_distinguishes_requests():
    assert request_digest(["GET", "/a"]) == request_digest(["GET", "/a"])
    assert request_digest(["GET", "/a"]) != request_digest(["GET", "/b"])
    assert request_digest(b"x") == request_digest("x")


def _drive(outcomes, threshold, cooldown, dt, warm):
    """Run the breaker and the oracle side by side over one outcome string."""
    clock, stub = Clock(), Stub()
    cb = CircuitBreaker(BreakerConfig(failure_threshold=threshold, cooldown=cooldown), clock=clock)
    if warm:
        cb.cache.put(("s", request_digest("r")), "seed")
    step = breaker_oracle(threshold, cooldown)
    state, is_warm = ("C", 0), warm
    for i, outcome in enumerate(outcomes):
        clock.now = i * dt
        stub.next = outcome
        before = stub.calls
        try:
            result = cb.call_with_breaker("s", "r", stub).provenance
        except UpstreamFailure:
            result = "error"
        state, invoked, expected = step(state, outcome, clock.now, is_warm)
        is_warm = is_warm or expected == "live"
        assert (stub.calls - before == 1) == invoked
        assert result == expected
        assert encode(cb.state("s")) == state


def test_exhaustive_outcome_strings_match_oracle():
    runs = 0
    for n in range(9):
        for outcomes in itertools.product((SUCCESS, FAILURE), repeat=n):
            for threshold, dt, warm in itertools.product((1, 3, 5), (0.0, 10.0, 30.0), (False, True)):
                _drive(outcomes, threshold, 30.0, dt, warm)
                runs += 1
    assert runs == 511 * 18


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from([SUCCESS, FAILURE]), max_size=40), st.integers(1, 6), st.floats(0, 20))
def test_random_histories_match_oracle(outcomes, threshold, dt):
    _drive(outcomes, threshold, 30.0, dt, warm=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["r1", "r2", "r3"]), st.booleans()), max_size=40))
def test_cache_only_serves_previous_live_replies(calls):
    clock = Clock()
    cb = CircuitBreaker(BreakerConfig(failure_threshold=2), clock=clock)
    live = {}
    for i, (request, ok) in enumerate(calls):
        clock.now = float(i)

        def upstream(r, ok=ok, i=i):
            if not ok:
                raise ConnectionError
            return f"{r}@{i}"

        try:
            result = cb.call_with_breaker("s", request, upstream)
        except UpstreamFailure:
            continue
        if result.provenance == LIVE:
            live[request] = result.response
        else:
            assert result.response == live[request]


def test_half_open_admits_a_single_probe():
    clock = Clock()
    cb = CircuitBreaker(BreakerConfig(failure_threshold=1, cooldown=10), clock=clock)
    cb.cache.put(("s", request_digest("r")), "cached")
    with pytest.raises(UpstreamFailure):
        cb.call_with_breaker("s", "x", _fail)
    clock.now = 10.0
    entered, release = threading.Event(), threading.Event()
    invocations = []

    def probe(request):
        invocations.append(request)
        entered.set()
        release.wait(5)
        return "fresh"

    results = []
    t = threading.Thread(target=lambda: results.append(cb.call_with_breaker("s", "r", probe)))
    t.start()
    assert entered.wait(5)
    assert isinstance(cb.state("s"), HalfOpen)
    others = [cb.call_with_breaker("s", "r", probe) for _ in range(5)]
    release.set()
    t.join()
    assert len(invocations) == 1
    assert {o.provenance for o in others} == {CACHED}
    assert results[0].provenance == LIVE and cb.state("s") == Closed(0)


def _fail(request):
    raise ConnectionError("down")


def test_metrics_shape():
    cb = CircuitBreaker(clock=Clock())
    cb.call_with_breaker("s", "r", lambda r: "ok")
    m = cb.metrics()["s"]
    assert m["state"] == "closed" and m["live"] == 1 and m["cache_hits"] == 0
