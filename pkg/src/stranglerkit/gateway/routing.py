"""Route table and deterministic traffic-shift bucketing.

``bucket(key)`` is the first 8 bytes of BLAKE2b (digest_size=8) over the
UTF-8 key, read big-endian, modulo 100. A request goes to the extracted
target exactly when ``bucket(key) < shift_percent``, so raising the shift only
ever moves keys from legacy to extracted.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Iterable

from stranglerkit.errors import InvalidPercent, NoRouteMatched, UnknownRoute
from stranglerkit.model import RouteEntry


def stable_hash64(key: str) -> int:
    return int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "big")


def bucket(key: str) -> int:
    return stable_hash64(key) % 100


def prefix_matches(prefix: str, path: str) -> bool:
    """Segment-aware prefix test: ``/a`` matches ``/a`` and ``/a/x`` but not ``/ab``."""
    if prefix == "/" or path == prefix:
        return True
    return path.startswith(prefix.rstrip("/") + "/")


@dataclass(frozen=True)
class Decision:
    target: str
    prefix: str
    extracted: bool


@dataclass(frozen=True)
class RouteTable:
    entries: tuple[RouteEntry, ...] = ()

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e.path_prefix))
        seen = set()
        for e in entries:
            if e.path_prefix in seen:
                raise ValueError(f"duplicate route prefix {e.path_prefix!r}")
            seen.add(e.path_prefix)
            _check_percent(e, e.shift_percent)
        object.__setattr__(self, "entries", entries)

    @classmethod
    def of(cls, entries: Iterable[RouteEntry]) -> RouteTable:
        return cls(tuple(entries))

    def get(self, prefix: str) -> RouteEntry | None:
        for e in self.entries:
            if e.path_prefix == prefix:
                return e
        return None

    def match(self, path: str) -> RouteEntry | None:
        best = None
        for e in self.entries:
            if prefix_matches(e.path_prefix, path) and (best is None or len(e.path_prefix) > len(best.path_prefix)):
                best = e
        return best


def _check_percent(entry: RouteEntry, percent) -> None:
    if not isinstance(percent, int) or isinstance(percent, bool) or not 0 <= percent <= 100:
        raise InvalidPercent(f"shift {percent!r} outside [0, 100]")
    if percent > 0 and entry.extracted_target is None:
        raise InvalidPercent(f"route {entry.path_prefix!r} has no extracted target to shift to")


def route(table: RouteTable, request) -> Decision:
    """Pick the target service for a request with ``path`` and ``key`` attributes."""
    entry = table.match(request.path)
    if entry is None:
        raise NoRouteMatched(f"no route for {request.path!r}")
    to_extracted = entry.extracted_target is not None and bucket(request.key) < entry.shift_percent
    target = entry.extracted_target if to_extracted else entry.legacy_target
    return Decision(target, entry.path_prefix, to_extracted)


def set_shift(table: RouteTable, path_prefix: str, percent: int) -> RouteTable:
    entry = table.get(path_prefix)
    if entry is None:
        raise UnknownRoute(f"no route with prefix {path_prefix!r}")
    _check_percent(entry, percent)
    if entry.shift_percent == percent:
        return table
    return RouteTable(tuple(replace(e, shift_percent=percent) if e is entry else e for e in table.entries))
