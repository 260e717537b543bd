"""Deterministic trace replay against a SystemModel.

Each request is routed like the gateway would route it, walks the call graph
from its endpoint's module to the nearest module that uses the requested
table, and reads or writes a content-addressed row. The response digest
covers the modules visited and the row digests touched, so two models that
serve the same data along the same logical path produce identical reports
even when calls became API calls or rows moved to another database.

Counters follow the cost model of a decomposed system: every hop over an api
edge, every proxied read of another service's table, every glue-code access
and every database call (including change-log replication into a syncing
replica) is counted.
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable

from stranglerkit import dbsplit
from stranglerkit.dbsplit import INSERT, UPDATE, ChangeRecord, RowStore
from stranglerkit.errors import (
    IsolationBreach,
    NoDataPath,
    NoRouteMatched,
    TraceMismatch,
    UnboundEndpoint,
)
from stranglerkit.gateway.routing import RouteTable, route
from stranglerkit.model import (
    API,
    CALL,
    CONVERGED,
    CUTOVER,
    DATABASE_LAYER,
    MIRRORED,
    SYNCING,
    Request,
    SyncState,
    SystemModel,
    Violation,
    ordered,
)
from stranglerkit.planner import Migration, MigrationPlan, MigrationStep

METRICS = ("local_calls", "api_calls", "db_calls", "cross_boundary_api_calls", "glue_calls")
ROWS_PER_TABLE = 4
ABSENT = "-"


def digest(*parts) -> str:
    return hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).hexdigest()[:16]


def initial_rows(seed: int, table: str) -> dict[str, str]:
    return {f"r{i}": digest("row", seed, table, f"r{i}") for i in range(ROWS_PER_TABLE)}


@dataclass(frozen=True)
class Response:
    seq: int
    module: str
    digest: str


@dataclass(frozen=True)
class ExecutionReport:
    responses: tuple[Response, ...]
    metrics: dict[str, int]
    instance_load: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "responses": [[r.seq, r.module, r.digest] for r in self.responses],
            "metrics": {k: self.metrics[k] for k in METRICS},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ExecutionReport:
        return cls(tuple(Response(*r) for r in doc["responses"]), dict(doc["metrics"]))


@dataclass(frozen=True)
class Verdict:
    equal: bool
    seq: int | None = None
    expected: str | None = None
    actual: str | None = None

    def to_json(self):
        if self.equal:
            return "equal"
        return {"seq": self.seq, "expected": self.expected, "actual": self.actual}


class _Run:
    def __init__(self, model: SystemModel, seed: int):
        self.model = model
        self.seed = seed
        self.counts = dict.fromkeys(METRICS, 0)
        self.routes = RouteTable.of(model.routes)
        self.access = model.access_index
        self.accessors: dict[str, set[str]] = defaultdict(set)
        for a in model.data_access:
            self.accessors[a.table].add(a.module)
        self.adj: dict[str, list[str]] = defaultdict(list)
        self.hop_kind: dict[tuple[str, str], str] = {}
        for e in ordered(model.edges):
            if e.role == CALL:
                self.adj[e.src].append(e.dst)
                self.hop_kind[(e.src, e.dst)] = e.kind
        self.fks = defaultdict(list)
        for fk in ordered(model.foreign_keys):
            self.fks[fk.from_table].append(fk)
        self.cut = model.cutover_dbs()
        self.cut_services = {model.db_owner.get(db) for db in self.cut}
        self._paths: dict[tuple[str, str], list[str]] = {}
        self._authority: dict[str, str] = {}
        self._load_data()

    # -- data plane --------------------------------------------------------

    def _load_data(self) -> None:
        m = self.model
        replicas = {s.target_db: s for s in m.sync}
        self.stores: dict[str, RowStore] = {}
        self.logs: dict[str, list[ChangeRecord]] = defaultdict(list)
        self.runtime: dict[str, SyncState] = {}
        for db in sorted(m.tables_by_db):
            if db in replicas:
                continue
            names = sorted(m.tables_by_db[db])
            self.stores[db] = RowStore({t: initial_rows(self.seed, t) for t in names})
            for t in names:
                for key, d in sorted(initial_rows(self.seed, t).items()):
                    self.logs[db].append(ChangeRecord(len(self.logs[db]) + 1, t, key, INSERT, d))
        for db, st in sorted(replicas.items()):
            replica = RowStore.empty(m.tables_by_db.get(db, {}))
            state = SyncState(db, st.source_db, st.context, 0, SYNCING)
            if st.mode == MIRRORED:
                state = SyncState(db, st.source_db, st.context, 0, MIRRORED)
            elif st.mode in (SYNCING, CONVERGED):
                for change in self.logs.get(st.source_db, []):
                    if change.table in replica.tables:
                        replica, state = dbsplit.apply_change(replica, state, change)
            elif st.mode == CUTOVER:
                replica, state = dbsplit.sync_until_quiescent(self.logs.get(st.source_db, []), replica, state)
                state = dbsplit.advance(state, CUTOVER)
            self.stores[db] = replica
            self.runtime[db] = state

    def _read(self, db: str, table: str, key: str) -> str:
        store = self.stores[db]
        if table not in store.tables:
            return ABSENT
        return store.get(table, key) or ABSENT

    def _write(self, db: str, table: str, key: str, value: str) -> None:
        self.stores[db] = dbsplit.write_row(self.stores[db], self.runtime.get(db), table, key, value)
        if db in self.runtime:
            return
        log = self.logs[db]
        op = UPDATE if self.stores[db].get(table, key) is not None else INSERT
        change = ChangeRecord(len(log) + 1, table, key, op, value)
        log.append(change)
        for rdb, state in sorted(self.runtime.items()):
            if state.source_db == db and state.mode == SYNCING and table in self.stores[rdb].tables:
                self.stores[rdb], self.runtime[rdb] = dbsplit.apply_change(self.stores[rdb], state, change)
                self.counts["db_calls"] += 1

    # -- access resolution ---------------------------------------------------

    def _authoritative(self, table: str) -> str:
        if table not in self._authority:
            db = self.model.authoritative_db(table)
            if db is None:
                raise NoDataPath(f"table {table!r} lives nowhere")
            self._authority[table] = db
        return self._authority[table]

    def _direct(self, module: str, db: str) -> str:
        mine = self.model.service_of[module]
        owner = self.model.db_owner.get(db)
        glue = self.model.glue_for_service(mine)
        if owner == mine:
            pass
        elif glue is not None and glue.legacy_service == owner:
            self.counts["glue_calls"] += 1
        elif db in self.cut or mine in self.cut_services:
            raise IsolationBreach(f"{module!r} reached into {db!r} owned by {owner!r}")
        self.counts["db_calls"] += 1
        return db

    def _fetch(self, module: str, table: str) -> str:
        """Fetch a row the module has no declared access to (application-side join)."""
        db = self._authoritative(table)
        mine = self.model.service_of[module]
        owner = self.model.db_owner.get(db)
        glue = self.model.glue_for_service(mine)
        if owner != mine:
            if glue is not None and glue.legacy_service == owner:
                self.counts["glue_calls"] += 1
            elif db in self.cut or mine in self.cut_services:
                # isolated databases are only reachable through the owner's API
                self.counts["api_calls"] += 1
                self.counts["cross_boundary_api_calls"] += 1
        self.counts["db_calls"] += 1
        return db

    def _locate(self, module: str, table: str) -> str:
        entry = self.access.get((module, table))
        if entry is None:
            return self._fetch(module, table)
        if entry.via is not None:
            self.counts["api_calls"] += 1
            self.counts["cross_boundary_api_calls"] += 1
            return self._direct(entry.via, self.access[(entry.via, table)].database)
        return self._direct(module, entry.database)

    # -- request flow --------------------------------------------------------

    def _path(self, start: str, table: str) -> list[str]:
        cache_key = (start, table)
        if cache_key in self._paths:
            return self._paths[cache_key]
        targets = self.accessors.get(table, set())
        parent: dict[str, str | None] = {start: None}
        queue = deque([start])
        found = start if start in targets else None
        while queue and found is None:
            u = queue.popleft()
            for v in self.adj.get(u, ()):
                if v in parent:
                    continue
                parent[v] = u
                if v in targets:
                    found = v
                    break
                queue.append(v)
        if found is None:
            raise NoDataPath(f"no module reachable from {start!r} uses table {table!r}")
        path = [found]
        while parent[path[-1]] is not None:
            path.append(parent[path[-1]])
        path.reverse()
        self._paths[cache_key] = path
        return path

    def handle(self, r: Request) -> Response:
        m = self.model
        entry_module = m.endpoint_map.get(r.endpoint)
        if entry_module is None:
            raise UnboundEndpoint(f"endpoint {r.endpoint!r} is not bound")
        try:
            # the gateway hop is not a module edge; routing only has to succeed
            route(self.routes, r)
        except NoRouteMatched:
            pass

        path = self._path(entry_module, r.table)
        for hop in zip(path, path[1:]):
            self.counts["api_calls" if self.hop_kind[hop] == API else "local_calls"] += 1
        handler = path[-1]

        db = self._locate(handler, r.table)
        if r.op == "write":
            value = digest("write", self.seed, r.seq, r.table, r.row_key)
            self._write(db, r.table, r.row_key, value)
            touched = [value]
        else:
            touched = [self._read(db, r.table, r.row_key)]
            seen = set()
            for fk in self.fks.get(r.table, ()):
                if (fk.from_column, fk.to_table) in seen:
                    continue
                seen.add((fk.from_column, fk.to_table))
                if fk.enforcement == DATABASE_LAYER and fk.from_db == db and fk.to_db == db:
                    joined_db = db
                else:
                    joined_db = self._fetch(handler, fk.to_table)
                touched.append(self._read(joined_db, fk.to_table, r.row_key))
        body = json.dumps([path, touched], separators=(",", ":"))
        return Response(r.seq, handler, digest("response", body))


def execute_trace(model: SystemModel, trace: Iterable[Request], seed: int = 0, replicas: int = 1) -> ExecutionReport:
    """Replay ``trace``; identical inputs give identical reports.

    ``replicas`` > 1 spreads requests round-robin over copies of the system
    sharing one database (horizontal scaling of the monolith).
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    run = _Run(model, seed)
    load = [0] * replicas
    responses = []
    for i, r in enumerate(trace):
        load[i % replicas] += 1
        responses.append(run.handle(r))
    return ExecutionReport(tuple(responses), dict(run.counts), tuple(load))


def equivalence_check(a: ExecutionReport, b: ExecutionReport) -> Verdict:
    if len(a.responses) != len(b.responses):
        raise TraceMismatch(f"reports cover {len(a.responses)} and {len(b.responses)} requests")
    for x, y in zip(a.responses, b.responses):
        if x.seq != y.seq:
            raise TraceMismatch(f"request seq {x.seq} paired with {y.seq}")
        if x.digest != y.digest:
            return Verdict(False, x.seq, x.digest, y.digest)
    return Verdict(True)


@dataclass(frozen=True)
class StepReport:
    step: MigrationStep
    verdict: Verdict
    metrics: dict[str, int]
    delta: dict[str, int]
    rolled_back: bool = False

    def to_dict(self) -> dict:
        return {
            **self.step.to_dict(),
            "verdict": self.verdict.to_json(),
            "metrics": self.metrics,
            "delta": self.delta,
            "rolled_back": self.rolled_back,
        }


@dataclass
class MigrationRun:
    baseline: ExecutionReport
    steps: list[StepReport] = field(default_factory=list)
    model: SystemModel | None = None
    violations: list[Violation] = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return any(s.rolled_back for s in self.steps)

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline.to_dict(),
            "steps": [s.to_dict() for s in self.steps],
            "diverged": self.diverged,
            "isolation_violations": [v.as_dict() for v in self.violations],
        }


def run_migration(
    model: SystemModel, plan: MigrationPlan | Iterable[MigrationStep], trace: list[Request], seed: int = 0
) -> MigrationRun:
    """Apply the plan step by step, replaying the trace after each step.

    The first step whose report diverges from the baseline is rolled back
    and the run stops there.
    """
    trace = list(trace)
    baseline = execute_trace(model, trace, seed)
    migration = Migration(model)
    result = MigrationRun(baseline, model=model)
    for step in plan:
        migration.apply(step)
        report = execute_trace(migration.model, trace, seed)
        verdict = equivalence_check(baseline, report)
        delta = {k: report.metrics[k] - baseline.metrics[k] for k in METRICS}
        if not verdict.equal:
            migration.rollback()
            result.steps.append(StepReport(step, verdict, report.metrics, delta, rolled_back=True))
            break
        result.steps.append(StepReport(step, verdict, report.metrics, delta))
    result.model = migration.model
    if not result.diverged:
        result.violations = dbsplit.verify_isolation(migration.model)
    return result
