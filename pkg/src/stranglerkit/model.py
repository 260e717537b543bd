"""Declarative model of an application under migration.

A :class:`SystemModel` is an immutable value: every collection is a frozenset
of frozen records, so two models compare equal exactly when they describe the
same system. Migration steps (planner, dbsplit) build new models instead of
editing old ones.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, fields
from functools import cached_property
from typing import Iterable

USER_INTERFACE = "user-interface"
BUSINESS_LOGIC = "business-logic"
DATA_ACCESS = "data-access"
LAYERS = (USER_INTERFACE, BUSINESS_LOGIC, DATA_ACCESS)

LOCAL = "local"
API = "api"
EDGE_KINDS = (LOCAL, API)

# Edge roles separate domain calls from migration infrastructure.
CALL = "call"
GLUE = "glue"
PROXY = "proxy"
EDGE_ROLES = (CALL, GLUE, PROXY)

READ_WRITE = "read-write"
READ_ONLY_REPLICA = "read-only-replica"
ACCESS_MODES = (READ_WRITE, READ_ONLY_REPLICA)

DATABASE_LAYER = "database-layer"
BUSINESS_LOGIC_LAYER = "business-logic-layer"
ENFORCEMENTS = (DATABASE_LAYER, BUSINESS_LOGIC_LAYER)

MIRRORED = "mirrored"
SYNCING = "syncing"
CONVERGED = "converged"
CUTOVER = "cutover"
SYNC_MODES = (MIRRORED, SYNCING, CONVERGED, CUTOVER)

FRONTEND_SERVICE = "frontend"


@dataclass(frozen=True, order=True)
class ModuleNode:
    id: str
    layer: str
    context: str | None = None


@dataclass(frozen=True, order=True)
class CallEdge:
    src: str
    dst: str
    kind: str = LOCAL
    weight: int = 1
    role: str = CALL

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.src, self.dst, self.role)


@dataclass(frozen=True, order=True)
class Table:
    name: str
    columns: tuple[str, ...]
    primary_key: str
    owner_db: str
    access_mode: str = READ_WRITE
    lifecycle_owner: str | None = None


@dataclass(frozen=True, order=True)
class ForeignKey:
    from_table: str
    from_column: str
    to_table: str
    from_db: str
    to_db: str
    enforcement: str = DATABASE_LAYER


@dataclass(frozen=True, order=True)
class DataAccess:
    """``module`` reads/writes ``table`` stored in ``database``.

    When ``via`` is set the access is served by that module's service API
    instead of touching the database directly.
    """

    module: str
    table: str
    database: str
    via: str | None = None


@dataclass(frozen=True, order=True)
class Freeze:
    modules: frozenset[str]
    edges: frozenset[tuple[str, str, str]]


@dataclass(frozen=True)
class Service:
    id: str
    modules: frozenset[str]
    database: str | None = None
    frozen: Freeze | None = None

    def __lt__(self, other: Service) -> bool:
        return self.id < other.id


@dataclass(frozen=True, order=True)
class Database:
    id: str


@dataclass(frozen=True, order=True)
class Endpoint:
    path: str
    module: str


@dataclass(frozen=True, order=True)
class RouteEntry:
    path_prefix: str
    legacy_target: str
    extracted_target: str | None = None
    shift_percent: int = 0


@dataclass(frozen=True, order=True)
class GlueRecord:
    context: str
    service: str
    legacy_service: str
    field_mapping: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True, order=True)
class SyncState:
    target_db: str
    source_db: str
    context: str
    applied_seq: int = 0
    mode: str = MIRRORED


@dataclass(frozen=True, order=True)
class Violation:
    rule: str
    ids: tuple[str, ...]
    message: str

    def as_dict(self) -> dict:
        return {"rule": self.rule, "ids": list(self.ids), "message": self.message}


def record_key(record) -> tuple:
    """Total ordering for records whose optional fields may be None."""
    out = []
    for f in fields(record):
        value = getattr(record, f.name)
        if value is None:
            out.append((0, ""))
        elif isinstance(value, frozenset):
            out.append((1, tuple(sorted(value))))
        elif isinstance(value, Freeze):
            out.append((1, record_key(value)))
        else:
            out.append((1, value))
    return tuple(out)


def ordered(records: Iterable) -> list:
    return sorted(records, key=record_key)


COLLECTIONS = (
    "services",
    "modules",
    "databases",
    "tables",
    "edges",
    "foreign_keys",
    "data_access",
    "endpoints",
    "routes",
    "glue",
    "sync",
)


@dataclass(frozen=True)
class SystemModel:
    services: frozenset[Service] = field(default_factory=frozenset)
    modules: frozenset[ModuleNode] = field(default_factory=frozenset)
    databases: frozenset[Database] = field(default_factory=frozenset)
    tables: frozenset[Table] = field(default_factory=frozenset)
    edges: frozenset[CallEdge] = field(default_factory=frozenset)
    foreign_keys: frozenset[ForeignKey] = field(default_factory=frozenset)
    data_access: frozenset[DataAccess] = field(default_factory=frozenset)
    endpoints: frozenset[Endpoint] = field(default_factory=frozenset)
    routes: frozenset[RouteEntry] = field(default_factory=frozenset)
    glue: frozenset[GlueRecord] = field(default_factory=frozenset)
    sync: frozenset[SyncState] = field(default_factory=frozenset)

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, frozenset):
                object.__setattr__(self, f.name, frozenset(value))

    def evolve(self, **changes: Iterable) -> SystemModel:
        """Return a copy with some collections replaced."""
        current = {name: getattr(self, name) for name in COLLECTIONS}
        current.update(changes)
        return SystemModel(**current)

    # -- indexes ---------------------------------------------------------

    @cached_property
    def module_index(self) -> dict[str, ModuleNode]:
        return {m.id: m for m in self.modules}

    @cached_property
    def service_index(self) -> dict[str, Service]:
        return {s.id: s for s in self.services}

    @cached_property
    def service_of(self) -> dict[str, str]:
        return {m: s.id for s in self.services for m in s.modules}

    @cached_property
    def db_owner(self) -> dict[str, str]:
        return {s.database: s.id for s in self.services if s.database is not None}

    @cached_property
    def tables_by_db(self) -> dict[str, dict[str, Table]]:
        out: dict[str, dict[str, Table]] = defaultdict(dict)
        for t in self.tables:
            out[t.owner_db][t.name] = t
        return dict(out)

    @cached_property
    def access_index(self) -> dict[tuple[str, str], DataAccess]:
        return {(a.module, a.table): a for a in self.data_access}

    @cached_property
    def endpoint_map(self) -> dict[str, str]:
        return {e.path: e.module for e in self.endpoints}

    @cached_property
    def sync_by_db(self) -> dict[str, SyncState]:
        return {s.target_db: s for s in self.sync}

    @cached_property
    def contexts(self) -> tuple[str, ...]:
        return tuple(sorted({m.context for m in self.modules if m.context is not None}))

    def table(self, db: str, name: str) -> Table | None:
        return self.tables_by_db.get(db, {}).get(name)

    def context_modules(self, context: str) -> list[str]:
        return sorted(m.id for m in self.modules if m.context == context)

    def glue_for_service(self, service_id: str) -> GlueRecord | None:
        for g in self.glue:
            if g.service == service_id:
                return g
        return None

    def cutover_dbs(self) -> set[str]:
        return {s.target_db for s in self.sync if s.mode == CUTOVER}

    def authoritative_db(self, table: str) -> str | None:
        """Database holding the live copy of ``table``.

        A replica that has been cut over wins over its source copy.
        """
        for st in ordered(self.sync):
            if st.mode == CUTOVER and table in self.tables_by_db.get(st.target_db, {}):
                return st.target_db
        replicas = {s.target_db for s in self.sync}
        for db in sorted(self.tables_by_db):
            if db not in replicas and table in self.tables_by_db[db]:
                return db
        return None


def accessor_contexts(model: SystemModel) -> dict[tuple[str, str], set[str]]:
    """Map (db, table) to the contexts of every module that reads it."""
    out: dict[tuple[str, str], set[str]] = defaultdict(set)
    for a in model.data_access:
        for mid in (a.module, a.via):
            node = model.module_index.get(mid) if mid else None
            if node is not None and node.context is not None:
                out[(a.database, a.table)].add(node.context)
    return out


def crossing_accesses(model: SystemModel) -> list[DataAccess]:
    """Direct table accesses whose module lives outside the owning service."""
    out = []
    for a in ordered(model.data_access):
        accessor = a.via or a.module
        owner = model.db_owner.get(a.database)
        if owner is not None and model.service_of.get(accessor) != owner:
            out.append(a)
    return out


def crossing_foreign_keys(model: SystemModel) -> list[ForeignKey]:
    return [
        fk
        for fk in ordered(model.foreign_keys)
        if fk.enforcement == DATABASE_LAYER and fk.from_db != fk.to_db
    ]


def _check_records(model: SystemModel, v: list[Violation]) -> None:
    seen: dict[str, ModuleNode] = {}
    for m in ordered(model.modules):
        if m.id in seen:
            v.append(Violation("duplicate-module", (m.id,), f"module {m.id!r} declared twice"))
        seen[m.id] = m
        if m.layer not in LAYERS:
            v.append(Violation("bad-layer", (m.id,), f"layer {m.layer!r} is not one of {LAYERS}"))

    ids = [s.id for s in model.services]
    for sid in sorted({i for i in ids if ids.count(i) > 1}):
        v.append(Violation("duplicate-service", (sid,), f"service {sid!r} declared twice"))

    membership: dict[str, list[str]] = defaultdict(list)
    for s in ordered(model.services):
        for mid in sorted(s.modules):
            membership[mid].append(s.id)
            if mid not in model.module_index:
                v.append(Violation("unknown-module", (s.id, mid), f"service {s.id!r} lists unknown module {mid!r}"))
    for mid, owners in sorted(membership.items()):
        if len(owners) > 1:
            v.append(Violation("module-in-two-services", (mid, *owners), f"module in two services: {mid!r} in {owners}"))
    for mid in sorted(model.module_index):
        if mid not in membership:
            v.append(Violation("module-without-service", (mid,), f"module {mid!r} belongs to no service"))

    db_ids = {d.id for d in model.databases}
    db_services: dict[str, list[str]] = defaultdict(list)
    for s in ordered(model.services):
        if s.database is not None:
            if s.database not in db_ids:
                v.append(Violation("unknown-database", (s.id, s.database), f"service {s.id!r} owns unknown database {s.database!r}"))
            db_services[s.database].append(s.id)
    for db in sorted(db_ids):
        owners = db_services.get(db, [])
        if len(owners) > 1:
            v.append(Violation("database-in-two-services", (db, *owners), f"database {db!r} owned by {owners}"))
        elif not owners:
            v.append(Violation("database-without-service", (db,), f"database {db!r} has no owning service"))

    table_keys: set[tuple[str, str]] = set()
    for t in ordered(model.tables):
        if (t.owner_db, t.name) in table_keys:
            v.append(Violation("duplicate-table", (t.owner_db, t.name), f"table {t.name!r} declared twice in {t.owner_db!r}"))
        table_keys.add((t.owner_db, t.name))
        if t.owner_db not in db_ids:
            v.append(Violation("unknown-database", (t.name, t.owner_db), f"table {t.name!r} in unknown database {t.owner_db!r}"))
        if len(set(t.columns)) != len(t.columns):
            v.append(Violation("duplicate-column", (t.owner_db, t.name), f"table {t.name!r} repeats a column"))
        if t.primary_key not in t.columns:
            v.append(Violation("primary-key-not-column", (t.owner_db, t.name), f"primary key {t.primary_key!r} not a column of {t.name!r}"))
        if t.access_mode not in ACCESS_MODES:
            v.append(Violation("bad-access-mode", (t.owner_db, t.name), f"access mode {t.access_mode!r}"))


def _check_edges(model: SystemModel, v: list[Violation]) -> None:
    keys: set[tuple[str, str, str]] = set()
    for e in ordered(model.edges):
        ids = (e.src, e.dst)
        if e.key in keys:
            v.append(Violation("duplicate-edge", ids, f"edge {e.src}->{e.dst} ({e.role}) declared twice"))
        keys.add(e.key)
        if e.src == e.dst:
            v.append(Violation("self-edge", ids, f"edge from {e.src!r} to itself"))
        if e.kind not in EDGE_KINDS:
            v.append(Violation("bad-edge-kind", ids, f"edge kind {e.kind!r}"))
        if e.role not in EDGE_ROLES:
            v.append(Violation("bad-edge-role", ids, f"edge role {e.role!r}"))
        if not isinstance(e.weight, int) or e.weight < 1:
            v.append(Violation("bad-weight", ids, f"edge weight {e.weight!r} must be a positive integer"))
        missing = [m for m in ids if m not in model.module_index]
        if missing:
            v.append(Violation("unknown-module", ids, f"edge references unknown module(s) {missing}"))
            continue
        same = model.service_of.get(e.src) == model.service_of.get(e.dst)
        if e.kind == API and same:
            v.append(Violation("api-edge-same-service", ids, f"api edge {e.src}->{e.dst} inside one service"))
        if e.kind == LOCAL and not same:
            v.append(Violation("local-edge-cross-service", ids, f"local edge {e.src}->{e.dst} crosses services"))


def _check_data(model: SystemModel, v: list[Violation]) -> None:
    for fk in ordered(model.foreign_keys):
        ids = (fk.from_table, fk.from_column, fk.to_table)
        src = model.table(fk.from_db, fk.from_table)
        dst = model.table(fk.to_db, fk.to_table)
        if src is None or dst is None:
            v.append(Violation("unknown-table", ids, "foreign key references a nonexistent table"))
        elif fk.from_column not in src.columns:
            v.append(Violation("unknown-column", ids, f"{fk.from_column!r} is not a column of {fk.from_table!r}"))
        if fk.enforcement not in ENFORCEMENTS:
            v.append(Violation("bad-enforcement", ids, f"enforcement {fk.enforcement!r}"))

    pairs: set[tuple[str, str]] = set()
    for a in ordered(model.data_access):
        ids = (a.module, a.table, a.database)
        if (a.module, a.table) in pairs:
            v.append(Violation("duplicate-data-access", ids, f"{a.module!r} accesses {a.table!r} twice"))
        pairs.add((a.module, a.table))
        node = model.module_index.get(a.module)
        if node is None:
            v.append(Violation("unknown-module", ids, f"data access by unknown module {a.module!r}"))
        elif node.layer == USER_INTERFACE:
            v.append(Violation("ui-data-access", ids, f"user-interface module {a.module!r} touches a table"))
        if model.table(a.database, a.table) is None:
            v.append(Violation("unknown-table", ids, f"table {a.table!r} not in database {a.database!r}"))
        if a.via is not None:
            served = model.access_index.get((a.via, a.table))
            if a.via not in model.module_index:
                v.append(Violation("unknown-module", ids, f"proxy module {a.via!r} unknown"))
            elif served is None or served.via is not None or served.database != a.database:
                v.append(Violation("proxy-without-access", ids, f"proxy {a.via!r} has no direct access to {a.table!r}"))

    for (db, name), ctxs in sorted(accessor_contexts(model).items()):
        t = model.table(db, name)
        if t is None:
            continue
        if len(ctxs) > 1 and t.lifecycle_owner is None:
            v.append(Violation("shared-table-without-owner", (db, name), f"table {name!r} shared by {sorted(ctxs)} needs a lifecycle owner"))
        if t.lifecycle_owner is not None and t.lifecycle_owner not in ctxs:
            v.append(Violation("lifecycle-owner-not-accessor", (db, name), f"lifecycle owner {t.lifecycle_owner!r} never touches {name!r}"))


def _check_routing(model: SystemModel, v: list[Violation]) -> None:
    paths: set[str] = set()
    for ep in ordered(model.endpoints):
        if ep.path in paths:
            v.append(Violation("duplicate-endpoint", (ep.path,), f"endpoint {ep.path!r} bound twice"))
        paths.add(ep.path)
        if ep.module not in model.module_index:
            v.append(Violation("unknown-module", (ep.path, ep.module), f"endpoint bound to unknown module {ep.module!r}"))

    prefixes: set[str] = set()
    for r in ordered(model.routes):
        ids = (r.path_prefix,)
        if r.path_prefix in prefixes:
            v.append(Violation("duplicate-route", ids, f"route prefix {r.path_prefix!r} declared twice"))
        prefixes.add(r.path_prefix)
        if not isinstance(r.shift_percent, int) or not 0 <= r.shift_percent <= 100:
            v.append(Violation("bad-shift", ids, f"shift {r.shift_percent!r} outside [0, 100]"))
        elif r.shift_percent > 0 and r.extracted_target is None:
            v.append(Violation("shift-without-extracted", ids, "shift > 0 needs an extracted target"))
        for target in (r.legacy_target, r.extracted_target):
            if target is not None and target not in model.service_index:
                v.append(Violation("unknown-service", (r.path_prefix, target), f"route targets unknown service {target!r}"))


def _check_migration_state(model: SystemModel, v: list[Violation]) -> None:
    for s in ordered(model.services):
        if s.frozen is None:
            continue
        for mid in sorted(s.modules - s.frozen.modules):
            v.append(Violation("frozen-monolith", (s.id, mid), f"module {mid!r} added to frozen service {s.id!r}"))
        for e in ordered(model.edges):
            inside = e.src in s.modules and e.dst in s.modules
            if inside and e.key not in s.frozen.edges:
                v.append(Violation("frozen-monolith", (s.id, e.src, e.dst), f"edge {e.src}->{e.dst} added to frozen service {s.id!r}"))

    for g in ordered(model.glue):
        for sid in (g.service, g.legacy_service):
            if sid not in model.service_index:
                v.append(Violation("unknown-service", (g.context, sid), f"glue references unknown service {sid!r}"))

    db_ids = {d.id for d in model.databases}
    for st in ordered(model.sync):
        if st.mode not in SYNC_MODES:
            v.append(Violation("bad-sync-mode", (st.target_db,), f"sync mode {st.mode!r}"))
        for db in (st.target_db, st.source_db):
            if db not in db_ids:
                v.append(Violation("unknown-database", (st.context, db), f"sync state references unknown database {db!r}"))

    cut = model.cutover_dbs()
    if cut:
        cut_services = {model.db_owner.get(db) for db in cut}
        for a in crossing_accesses(model):
            accessor = a.via or a.module
            if a.database in cut or model.service_of.get(accessor) in cut_services:
                v.append(Violation(
                    "isolation",
                    (a.module, a.table, a.database),
                    f"{a.module!r} reads {a.table!r} in {a.database!r} owned by another service after cutover",
                ))


def validate(model: SystemModel) -> list[Violation]:
    """Return every invariant violation; an empty list means the model is valid."""
    violations: list[Violation] = []
    _check_records(model, violations)
    _check_edges(model, violations)
    _check_data(model, violations)
    _check_routing(model, violations)
    _check_migration_state(model, violations)
    return violations


@dataclass(frozen=True, order=True)
class Request:
    seq: int
    endpoint: str
    key: str
    op: str
    table: str
    row_key: str

    @property
    def path(self) -> str:
        return self.endpoint


def check_trace(model: SystemModel, trace: Iterable[Request]) -> list[Violation]:
    v = []
    last = None
    for r in trace:
        if last is not None and r.seq <= last:
            v.append(Violation("seq-not-increasing", (str(r.seq),), f"seq {r.seq} follows {last}"))
        last = r.seq
        if r.endpoint not in model.endpoint_map:
            v.append(Violation("unbound-endpoint", (r.endpoint,), f"endpoint {r.endpoint!r} is not bound to a module"))
        if r.op not in ("read", "write"):
            v.append(Violation("bad-op", (str(r.seq),), f"op {r.op!r}"))
    return v
