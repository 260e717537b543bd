"""In-process service registry with heartbeat health checks and round-robin selection."""

from __future__ import annotations

import threading
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable

from stranglerkit.errors import DuplicateInstance, NoHealthyInstance, UnknownInstance, UnknownService

HEALTHY = "healthy"
UNHEALTHY = "unhealthy"
HEARTBEAT_INTERVAL = 10.0
DEFAULT_TIMEOUT = 3 * HEARTBEAT_INTERVAL


@dataclass(frozen=True)
class InstanceRecord:
    service_id: str
    instance_id: str
    address: str
    last_heartbeat: float
    status: str = HEALTHY

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StatusChange:
    service_id: str
    instance_id: str
    status: str


class _Pool:
    def __init__(self):
        self.records: list[InstanceRecord] = []
        self.cursor = 0

    def index(self, instance_id: str) -> int:
        for i, r in enumerate(self.records):
            if r.instance_id == instance_id:
                return i
        return -1


class Registry:
    """Linearizable registry: every public method runs under one lock."""

    def __init__(self, clock: Callable[[], float] = time.monotonic, timeout: float = DEFAULT_TIMEOUT):
        self.clock = clock
        self.timeout = timeout
        self._pools: dict[str, _Pool] = {}
        self._lock = threading.RLock()

    def _pool(self, service_id: str) -> _Pool:
        pool = self._pools.get(service_id)
        if pool is None:
            raise UnknownService(f"no service {service_id!r} in the registry")
        return pool

    def _find(self, service_id: str, instance_id: str) -> tuple[_Pool, int]:
        pool = self._pools.get(service_id)
        i = pool.index(instance_id) if pool else -1
        if i < 0:
            raise UnknownInstance(f"{service_id}/{instance_id} is not registered")
        return pool, i

    def register(self, service_id: str, instance_id: str, address: str) -> InstanceRecord:
        with self._lock:
            pool = self._pools.setdefault(service_id, _Pool())
            if pool.index(instance_id) >= 0:
                raise DuplicateInstance(f"{service_id}/{instance_id} is already registered")
            record = InstanceRecord(service_id, instance_id, address, self.clock())
            pool.records.append(record)
            return record

    def deregister(self, service_id: str, instance_id: str) -> None:
        with self._lock:
            pool, i = self._find(service_id, instance_id)
            del pool.records[i]
            if i < pool.cursor:
                pool.cursor -= 1
            if pool.cursor >= len(pool.records):
                pool.cursor = 0

    def heartbeat(self, service_id: str, instance_id: str, at: float | None = None) -> InstanceRecord:
        with self._lock:
            pool, i = self._find(service_id, instance_id)
            record = replace(pool.records[i], last_heartbeat=self.clock() if at is None else at)
            pool.records[i] = record
            return record

    def sweep(self, now: float | None = None) -> list[StatusChange]:
        """Re-derive every instance's health; returns only the records that flipped."""
        with self._lock:
            now = self.clock() if now is None else now
            changes = []
            for service_id in sorted(self._pools):
                pool = self._pools[service_id]
                for i, r in enumerate(pool.records):
                    status = UNHEALTHY if now - r.last_heartbeat > self.timeout else HEALTHY
                    if status != r.status:
                        pool.records[i] = replace(r, status=status)
                        changes.append(StatusChange(service_id, r.instance_id, status))
            return changes

    def next_instance(self, service_id: str) -> InstanceRecord:
        with self._lock:
            pool = self._pool(service_id)
            n = len(pool.records)
            for step in range(n):
                i = (pool.cursor + step) % n
                if pool.records[i].status == HEALTHY:
                    pool.cursor = (i + 1) % n
                    return pool.records[i]
            raise NoHealthyInstance(f"service {service_id!r} has no healthy instance")

    def instances(self, service_id: str) -> list[InstanceRecord]:
        with self._lock:
            return list(self._pool(service_id).records)

    def lookup(self, service_id: str, instance_id: str) -> InstanceRecord:
        with self._lock:
            pool, i = self._find(service_id, instance_id)
            return pool.records[i]

    def services(self) -> list[str]:
        with self._lock:
            return sorted(self._pools)
