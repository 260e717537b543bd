"""Database-per-service decomposition.

The flow for one bounded context is: find the tables it uses, hoist foreign
keys that would straddle the new boundary into the business logic, mirror the
owned tables into a fresh read-only replica, replay the source change log
into it until quiescent, then cut the extracted service over to the replica
and verify that no module reaches into another service's database.

Rows are content digests (``row_key -> row_digest``); real column values never
matter for convergence.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Mapping

from stranglerkit.errors import (
    AlreadyMirrored,
    NotConverged,
    ParseError,
    PreconditionFailed,
    ReadOnlyReplica,
    UnknownContext,
    UnknownTable,
    WrongMode,
)
from stranglerkit.io import schema
from stranglerkit.model import (
    API,
    BUSINESS_LOGIC_LAYER,
    CONVERGED,
    CUTOVER,
    DATABASE_LAYER,
    FRONTEND_SERVICE,
    MIRRORED,
    PROXY,
    READ_ONLY_REPLICA,
    READ_WRITE,
    SYNC_MODES,
    SYNCING,
    CallEdge,
    DataAccess,
    Database,
    SyncState,
    SystemModel,
    Table,
    Violation,
    accessor_contexts,
    crossing_accesses,
    crossing_foreign_keys,
)

INSERT, UPDATE, DELETE = "insert", "update", "delete"

# Fault names accepted by cutover(); used only by the migration fault harness.
FAULT_SKIP_LEGACY_REWRITE = "skip-legacy-rewrite"


@dataclass(frozen=True, order=True)
class ChangeRecord:
    seq: int
    table: str
    row_key: str
    op: str
    row_digest: str | None = None


class RowStore:
    """Per-table ``row_key -> row_digest`` maps. Treated as an immutable value."""

    __slots__ = ("_tables",)

    def __init__(self, tables: Mapping[str, Mapping[str, str]] | None = None):
        self._tables = {name: dict(rows) for name, rows in (tables or {}).items()}

    @classmethod
    def empty(cls, names: Iterable[str]) -> RowStore:
        return cls({n: {} for n in names})

    @property
    def tables(self) -> frozenset[str]:
        return frozenset(self._tables)

    def get(self, table: str, key: str) -> str | None:
        return self._tables[table].get(key)

    def rows(self, table: str) -> dict[str, str]:
        return dict(self._tables[table])

    def project(self, names: Iterable[str]) -> RowStore:
        return RowStore({n: self._tables.get(n, {}) for n in names})

    def as_dict(self) -> dict[str, dict[str, str]]:
        return {n: dict(sorted(r.items())) for n, r in sorted(self._tables.items())}

    def _with(self, table: str, key: str, digest: str | None) -> RowStore:
        out = RowStore.__new__(RowStore)
        out._tables = dict(self._tables)
        rows = dict(self._tables[table])
        if digest is None:
            rows.pop(key, None)
        else:
            rows[key] = digest
        out._tables[table] = rows
        return out

    def __eq__(self, other):
        return isinstance(other, RowStore) and self._tables == other._tables

    def __repr__(self):
        return f"RowStore({self.as_dict()!r})"


def _mode_index(mode: str) -> int:
    return SYNC_MODES.index(mode)


def advance(state: SyncState, mode: str) -> SyncState:
    """Move ``state`` one step along mirrored -> syncing -> converged -> cutover."""
    if _mode_index(mode) != _mode_index(state.mode) + 1:
        raise WrongMode(f"cannot move {state.target_db!r} from {state.mode} to {mode}")
    return replace(state, mode=mode)


def apply_change(replica: RowStore, state: SyncState, change: ChangeRecord) -> tuple[RowStore, SyncState]:
    """Apply one change-log record to a syncing replica.

    Records at or below ``applied_seq`` are ignored, which makes replay of an
    at-least-once log safe.
    """
    if state.mode != SYNCING:
        raise WrongMode(f"replica {state.target_db!r} is {state.mode}, not syncing")
    if change.table not in replica.tables:
        raise UnknownTable(f"table {change.table!r} is not part of replica {state.target_db!r}")
    if change.seq <= state.applied_seq:
        return replica, state
    digest = None if change.op == DELETE else change.row_digest
    return replica._with(change.table, change.row_key, digest), replace(state, applied_seq=change.seq)


def sync_until_quiescent(
    source_log: Iterable[ChangeRecord], replica: RowStore, state: SyncState
) -> tuple[RowStore, SyncState]:
    """Drain ``source_log`` into the replica and mark it converged."""
    if state.mode != SYNCING:
        raise WrongMode(f"replica {state.target_db!r} is {state.mode}, not syncing")
    names = replica.tables
    pending = sorted((c for c in source_log if c.table in names), key=lambda c: c.seq)
    tables = {n: replica.rows(n) for n in names}
    applied = state.applied_seq
    for change in pending:
        if change.seq <= applied:
            continue
        rows = tables[change.table]
        if change.op == DELETE:
            rows.pop(change.row_key, None)
        else:
            rows[change.row_key] = change.row_digest
        applied = change.seq
    return RowStore(tables), replace(state, applied_seq=applied, mode=CONVERGED)


def write_row(store: RowStore, state: SyncState | None, table: str, key: str, digest: str | None) -> RowStore:
    """Write outside the sync path. Replicas accept this only after cutover."""
    if state is not None and state.mode != CUTOVER:
        raise ReadOnlyReplica(f"replica {state.target_db!r} is read-only while {state.mode}")
    if table not in store.tables:
        raise UnknownTable(table)
    return store._with(table, key, digest)


# -- model-level operations ----------------------------------------------


def _require_context(model: SystemModel, context: str) -> None:
    if context not in model.contexts:
        raise UnknownContext(f"no bounded context named {context!r}")


def related_tables(model: SystemModel, context: str) -> set[str]:
    """Names of every table reached through data access by the context's modules."""
    _require_context(model, context)
    members = set(model.context_modules(context))
    return {a.table for a in model.data_access if a.module in members}


def shared_tables(model: SystemModel, context: str) -> dict[str, list[str]]:
    """Related tables that other contexts also touch, with those contexts."""
    related = related_tables(model, context)
    users: dict[str, set[str]] = defaultdict(set)
    for (_, name), ctxs in accessor_contexts(model).items():
        if name in related:
            users[name] |= ctxs
    return {n: sorted(c - {context}) for n, c in sorted(users.items()) if c - {context}}


def extracted_service(model: SystemModel, context: str) -> str | None:
    """The service made of exactly this context's back-end modules, if any."""
    for s in sorted(model.services):
        if s.id == FRONTEND_SERVICE or s.frozen is not None or not s.modules:
            continue
        if all(model.module_index[m].context == context for m in s.modules if m in model.module_index):
            return s.id
    return None


def source_database(model: SystemModel, context: str) -> str | None:
    """Database the context still reads directly and must be split away from."""
    members = set(model.context_modules(context))
    replicas = {s.target_db for s in model.sync}
    dbs = {
        a.database
        for a in model.data_access
        if a.module in members and a.via is None and a.database not in replicas
    }
    if len(dbs) > 1:
        raise PreconditionFailed(f"context {context!r} reads several databases {sorted(dbs)}")
    return next(iter(dbs), None)


def tables_to_move(model: SystemModel, context: str) -> tuple[str | None, set[str]]:
    """Source database and the tables whose lifecycle the context owns.

    A table only this context touches moves with it; a shared table moves
    only when its declared lifecycle owner is this context.
    """
    _require_context(model, context)
    src = source_database(model, context)
    if src is None:
        return None, set()
    members = set(model.context_modules(context))
    users = accessor_contexts(model)
    moved = set()
    for a in model.data_access:
        if a.module not in members or a.via is not None or a.database != src:
            continue
        table = model.table(src, a.table)
        owner = table.lifecycle_owner if table else None
        if owner == context or (owner is None and users[(src, a.table)] <= {context}):
            moved.add(a.table)
    return src, moved


def _boundary_crossers(model: SystemModel, src: str | None, moved: set[str]):
    boundary = {(src, t) for t in moved}
    for fk in model.foreign_keys:
        inside_from = (fk.from_db, fk.from_table) in boundary
        inside_to = (fk.to_db, fk.to_table) in boundary
        if inside_from != inside_to:
            yield fk


def hoist_constraints(model: SystemModel, context: str) -> SystemModel:
    """Move boundary-crossing foreign keys from the database into business logic."""
    src, moved = tables_to_move(model, context)
    hoist = {fk for fk in _boundary_crossers(model, src, moved) if fk.enforcement == DATABASE_LAYER}
    if not hoist:
        return model
    fks = (model.foreign_keys - hoist) | {replace(fk, enforcement=BUSINESS_LOGIC_LAYER) for fk in hoist}
    return model.evolve(foreign_keys=fks)


def replica_id(model: SystemModel, context: str) -> str:
    taken = {d.id for d in model.databases}
    base = f"db-{context}"
    candidate, n = base, 1
    while candidate in taken:
        n += 1
        candidate = f"{base}-{n}"
    return candidate


def mirror_schema(model: SystemModel, context: str) -> SystemModel:
    """Create the extracted service's replica with the owned tables' structure."""
    _require_context(model, context)
    if any(s.context == context for s in model.sync):
        raise AlreadyMirrored(f"context {context!r} already has a replica")
    svc_id = extracted_service(model, context)
    if svc_id is None:
        raise PreconditionFailed(f"context {context!r} has not been extracted into its own service")
    svc = model.service_index[svc_id]
    if svc.database is not None:
        raise AlreadyMirrored(f"service {svc_id!r} already owns {svc.database!r}")
    src, moved = tables_to_move(model, context)
    if src is None:
        raise PreconditionFailed(f"context {context!r} reads no tables")
    unhoisted = [fk for fk in _boundary_crossers(model, src, moved) if fk.enforcement == DATABASE_LAYER]
    if unhoisted:
        fk = unhoisted[0]
        raise PreconditionFailed(
            f"constraints not hoisted: {fk.from_table}.{fk.from_column} -> {fk.to_table} crosses the boundary"
        )
    db = replica_id(model, context)
    copies = {
        Table(t.name, t.columns, t.primary_key, db, READ_ONLY_REPLICA, t.lifecycle_owner)
        for t in (model.table(src, name) for name in moved)
    }
    return model.evolve(
        services=(model.services - {svc}) | {replace(svc, database=db)},
        databases=model.databases | {Database(db)},
        tables=model.tables | copies,
        sync=model.sync | {SyncState(db, src, context, 0, MIRRORED)},
    )


def sync_state(model: SystemModel, context: str) -> SyncState:
    for s in model.sync:
        if s.context == context:
            return s
    raise PreconditionFailed(f"context {context!r} has no replica")


def publish_sync(model: SystemModel, state: SyncState) -> SystemModel:
    """Record a new replica state in the model (forward transitions only)."""
    old = model.sync_by_db.get(state.target_db)
    if old is None:
        raise PreconditionFailed(f"no replica {state.target_db!r}")
    if _mode_index(state.mode) < _mode_index(old.mode) or state.applied_seq < old.applied_seq:
        raise WrongMode(f"replica {state.target_db!r} cannot go back from {old} to {state}")
    return model.evolve(sync=(model.sync - {old}) | {state})


def start_sync(model: SystemModel, context: str) -> SystemModel:
    return publish_sync(model, advance(sync_state(model, context), SYNCING))


def _proxy_for(model: SystemModel, service: str, table: str, db: str) -> str | None:
    """Smallest-id module of ``service`` that reads ``table`` in ``db`` directly."""
    members = model.service_index[service].modules
    candidates = sorted(
        a.module for a in model.data_access
        if a.module in members and a.table == table and a.database == db and a.via is None
    )
    return candidates[0] if candidates else None


def cutover(model: SystemModel, context: str, fault: str | None = None) -> SystemModel:
    """Point the extracted service at its converged replica.

    Afterwards every read of a moved table by another service goes through
    the extracted service's API, and every read by the extracted service of a
    table it does not own goes through the owner's API.
    """
    _require_context(model, context)
    state = sync_state(model, context)
    if state.mode != CONVERGED:
        raise NotConverged(f"replica {state.target_db!r} is {state.mode}")
    rdb, src = state.target_db, state.source_db
    svc_id = model.db_owner[rdb]
    members = model.service_index[svc_id].modules
    moved = set(model.tables_by_db.get(rdb, {}))

    access = set()
    for a in model.data_access:
        if a.module in members and a.via is None and a.database == src and a.table in moved:
            a = replace(a, database=rdb)
        access.add(a)
    probe = model.evolve(data_access=access)

    rewritten = set()
    edges = set(model.edges)
    for a in access:
        new = a
        if a.module in members:
            owner = probe.db_owner.get(a.database)
            if a.via is None and owner is not None and owner != svc_id:
                via = _proxy_for(probe, owner, a.table, a.database)
                if via is None:
                    raise PreconditionFailed(f"no module of {owner!r} serves table {a.table!r}")
                new = replace(a, via=via)
        elif a.database == src and a.table in moved and fault != FAULT_SKIP_LEGACY_REWRITE:
            via = _proxy_for(probe, svc_id, a.table, rdb)
            if via is None:
                raise PreconditionFailed(f"no module of {svc_id!r} serves table {a.table!r}")
            new = replace(a, database=rdb, via=via)
        if new.via is not None and new.via != a.via:
            if not any(e.src == new.module and e.dst == new.via and e.role == PROXY for e in edges):
                edges.add(CallEdge(new.module, new.via, API, 1, PROXY))
        rewritten.add(new)

    tables = {
        replace(t, access_mode=READ_WRITE) if t.owner_db == rdb else t for t in model.tables
    }
    fks = set()
    for fk in model.foreign_keys:
        if fk.from_db == src and fk.from_table in moved:
            fk = replace(fk, from_db=rdb)
        if fk.to_db == src and fk.to_table in moved:
            fk = replace(fk, to_db=rdb)
        fks.add(fk)
    return model.evolve(
        data_access=rewritten,
        edges=edges,
        tables=tables,
        foreign_keys=fks,
        sync=(model.sync - {state}) | {advance(state, CUTOVER)},
    )


def verify_isolation(model: SystemModel) -> list[Violation]:
    """Every direct cross-service table access and cross-database hard constraint."""
    out = [
        Violation(
            "data-access",
            (a.module, a.table, a.database),
            f"{a.via or a.module!r} reads {a.table!r} in {a.database!r} owned by {model.db_owner[a.database]!r}",
        )
        for a in crossing_accesses(model)
    ]
    out += [
        Violation(
            "foreign-key",
            (fk.from_table, fk.from_column, fk.to_table),
            f"database-layer key {fk.from_db}.{fk.from_table} -> {fk.to_db}.{fk.to_table} spans databases",
        )
        for fk in crossing_foreign_keys(model)
    ]
    return out


# -- change-log files ----------------------------------------------------


def read_changelog(lines: Iterable[str]) -> Iterator[ChangeRecord]:
    import jsonschema

    rec_schema = schema("changelog")
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            jsonschema.validate(doc, rec_schema)
        except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
            raise ParseError(f"change log line {n}: {exc}") from exc
        yield ChangeRecord(doc["seq"], doc["table"], doc["row_key"], doc["op"], doc.get("row_digest"))


def changelog_lines(records: Iterable[ChangeRecord]) -> Iterator[str]:
    for c in records:
        yield json.dumps(
            {"seq": c.seq, "table": c.table, "row_key": c.row_key, "op": c.op, "row_digest": c.row_digest}
        )
