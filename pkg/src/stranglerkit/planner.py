"""Strangler-fig migration plans: generation, application and rollback.

Every applied step is recorded in a :class:`Journal` as a structural diff of
the model's collections, so rolling back the most recent step is applying the
inverse diff.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable

from stranglerkit import dbsplit
from stranglerkit.errors import (
    AlreadyExtracted,
    NothingToRollback,
    NotLastApplied,
    PreconditionFailed,
    UnknownContext,
    UnknownStep,
)
from stranglerkit.gateway.routing import RouteTable, prefix_matches, set_shift
from stranglerkit.io import parse_json
from stranglerkit.model import (
    API,
    CUTOVER,
    DATA_ACCESS,
    FRONTEND_SERVICE,
    GLUE,
    LOCAL,
    USER_INTERFACE,
    COLLECTIONS,
    CallEdge,
    Freeze,
    GlueRecord,
    RouteEntry,
    Service,
    SystemModel,
)

FREEZE_MONOLITH = "FreezeMonolith"
SPLIT_FRONTEND = "SplitFrontend"
EXTRACT_SERVICE = "ExtractService"
ADD_GLUE_CODE = "AddGlueCode"
ADD_GATEWAY_ROUTE = "AddGatewayRoute"
MIRROR_TABLES = "MirrorTables"
START_SYNC = "StartSync"
CUTOVER_STEP = "Cutover"
SHIFT_TRAFFIC = "ShiftTraffic"
REMOVE_GLUE = "RemoveGlue"

# Canonical order; a plan's kinds must be non-decreasing in this rank.
KINDS = (
    FREEZE_MONOLITH,
    SPLIT_FRONTEND,
    EXTRACT_SERVICE,
    ADD_GLUE_CODE,
    ADD_GATEWAY_ROUTE,
    MIRROR_TABLES,
    START_SYNC,
    CUTOVER_STEP,
    SHIFT_TRAFFIC,
    REMOVE_GLUE,
)
RANK = {k: i for i, k in enumerate(KINDS)}

DEFAULT_SHIFTS = (10, 50, 100)


@dataclass(frozen=True)
class MigrationStep:
    id: int
    kind: str
    context: str | None = None
    path: str | None = None
    percent: int | None = None
    fault: str | None = None

    @property
    def params(self) -> dict:
        return {
            k: v
            for k, v in (("context", self.context), ("path", self.path), ("percent", self.percent), ("fault", self.fault))
            if v is not None
        }

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "params": self.params}

    def __str__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.params.items())
        return f"#{self.id} {self.kind}({args})"


@dataclass(frozen=True)
class MigrationPlan:
    target: str
    steps: tuple[MigrationStep, ...]

    def __iter__(self):
        return iter(self.steps)

    def __len__(self):
        return len(self.steps)

    def step(self, step_id: int) -> MigrationStep:
        for s in self.steps:
            if s.id == step_id:
                return s
        raise UnknownStep(f"plan has no step {step_id}")


def plan_to_json(plan: MigrationPlan | Iterable[MigrationStep]) -> str:
    return json.dumps([s.to_dict() for s in plan], indent=2) + "\n"


def load_plan(text: str | bytes) -> MigrationPlan:
    doc = parse_json(text, "plan")
    steps = []
    for rec in doc:
        if rec["kind"] not in RANK:
            raise UnknownStep(f"unknown step kind {rec['kind']!r}")
        steps.append(MigrationStep(rec["id"], rec["kind"], **rec.get("params", {})))
    target = next((s.context for s in steps if s.context), "")
    return MigrationPlan(target, tuple(steps))


def check_order(steps: Iterable[MigrationStep], complete: bool = True) -> list[str]:
    """Ordering problems in a step sequence; ``complete=False`` checks a prefix."""
    steps = list(steps)
    problems = []
    for a, b in zip(steps, steps[1:]):
        if RANK[b.kind] < RANK[a.kind]:
            problems.append(f"{b} must not follow {a}")
    last_shift: dict[str, int] = {}
    for s in steps:
        if s.kind == SHIFT_TRAFFIC:
            if s.percent < last_shift.get(s.path, 0):
                problems.append(f"{s} lowers the shift on {s.path!r}")
            last_shift[s.path] = s.percent
    kinds = [s.kind for s in steps]
    if kinds.count(CUTOVER_STEP) > 1:
        problems.append("more than one Cutover")
    if CUTOVER_STEP in kinds and START_SYNC not in kinds[: kinds.index(CUTOVER_STEP)]:
        problems.append("Cutover without a preceding StartSync")
    if complete:
        for path, pct in sorted(last_shift.items()):
            if pct != 100:
                problems.append(f"traffic on {path!r} ends at {pct}%, not 100%")
    return problems


# -- model helpers -----------------------------------------------------------


def monolith_id(model: SystemModel) -> str:
    """The frozen legacy service, or before any freeze the largest back-end service."""
    frozen = sorted(s.id for s in model.services if s.frozen is not None)
    if frozen:
        return frozen[0]
    candidates = [s for s in model.services if s.id != FRONTEND_SERVICE]
    if not candidates:
        raise PreconditionFailed("model has no back-end service")
    return min(candidates, key=lambda s: (-len(s.modules), s.id)).id


def _context_home(model: SystemModel, context: str) -> str:
    if context not in model.contexts:
        raise UnknownContext(f"no bounded context named {context!r}")
    homes = {
        model.service_of[m]
        for m in model.context_modules(context)
        if m in model.service_of and model.service_of[m] != FRONTEND_SERVICE
    }
    if len(homes) != 1:
        raise PreconditionFailed(f"context {context!r} lives in services {sorted(homes)}")
    return homes.pop()


def _require_extracted(model: SystemModel, context: str) -> Service:
    sid = dbsplit.extracted_service(model, context)
    if sid is None:
        raise PreconditionFailed(f"ExtractService({context}) has not been applied")
    return model.service_index[sid]


def _retype_edges(model: SystemModel, services: Iterable[Service]) -> set[CallEdge]:
    owner = {m: s.id for s in services for m in s.modules}
    out = set()
    for e in model.edges:
        kind = LOCAL if owner.get(e.src) == owner.get(e.dst) else API
        out.add(e if e.kind == kind else replace(e, kind=kind))
    return out


def _fresh_service_id(model: SystemModel, base: str) -> str:
    candidate, n = base, 1
    while candidate in model.service_index:
        n += 1
        candidate = f"{base}-{n}"
    return candidate


def _endpoint_paths(model: SystemModel, context: str) -> list[str]:
    """Route prefixes to add for a context: a shared prefix when one exists."""
    members = set(model.context_modules(context))
    own = sorted(e.path for e in model.endpoints if e.module in members)
    if not own:
        return []
    split = [p.strip("/").split("/") for p in own]
    common = []
    for parts in zip(*split):
        if len(set(parts)) != 1:
            break
        common.append(parts[0])
    prefix = "/" + "/".join(common)
    others = [e.path for e in model.endpoints if e.module not in members]
    if common and common != [""] and not any(prefix_matches(prefix, p) for p in others):
        return [prefix]
    return own


# -- step implementations ----------------------------------------------------


def _freeze(model: SystemModel, step: MigrationStep) -> SystemModel:
    svc = model.service_index[monolith_id(model)]
    if svc.frozen is not None:
        return model
    inside = frozenset(e.key for e in model.edges if e.src in svc.modules and e.dst in svc.modules)
    frozen = replace(svc, frozen=Freeze(frozenset(svc.modules), inside))
    return model.evolve(services=(model.services - {svc}) | {frozen})


def _split_frontend(model: SystemModel, step: MigrationStep) -> SystemModel:
    ui = {
        m.id for m in model.modules
        if m.layer == USER_INTERFACE and model.service_of.get(m.id) != FRONTEND_SERVICE
    }
    if not ui:
        return model
    services = set()
    for s in model.services:
        if s.id != FRONTEND_SERVICE:
            services.add(replace(s, modules=s.modules - ui) if s.modules & ui else s)
    current = model.service_index.get(FRONTEND_SERVICE)
    members = (current.modules if current else frozenset()) | ui
    services.add(Service(FRONTEND_SERVICE, frozenset(members)))
    return model.evolve(services=services, edges=_retype_edges(model, services))


def _extract(model: SystemModel, step: MigrationStep) -> SystemModel:
    ctx = step.context
    home_id = _context_home(model, ctx)
    if dbsplit.extracted_service(model, ctx) == home_id:
        raise AlreadyExtracted(f"context {ctx!r} already owns service {home_id!r}")
    home = model.service_index[home_id]
    if home.frozen is None:
        raise PreconditionFailed(f"FreezeMonolith has not been applied to {home_id!r}")
    moving = frozenset(m for m in home.modules if model.module_index[m].context == ctx)
    new = Service(_fresh_service_id(model, f"svc-{ctx}"), moving)
    services = (model.services - {home}) | {replace(home, modules=home.modules - moving), new}
    return model.evolve(services=services, edges=_retype_edges(model, services))


def _glue(model: SystemModel, step: MigrationStep) -> SystemModel:
    ctx = step.context
    svc = _require_extracted(model, ctx)
    if model.glue_for_service(svc.id) is not None:
        raise PreconditionFailed(f"glue for {ctx!r} already exists")
    src = dbsplit.source_database(model, ctx)
    legacy_id = model.db_owner[src] if src is not None else monolith_id(model)
    legacy = model.service_index[legacy_id]

    mapping = []
    readers = sorted(
        a.module for a in model.data_access
        if a.module in svc.modules and a.via is None and a.database == src
    )
    for name in sorted({a.table for a in model.data_access if a.module in svc.modules and a.database == src}):
        for col in model.table(src, name).columns:
            mapping.append((f"{name}.{col}", f"{name}_{col}"))

    edges = set(model.edges)
    near = readers[0] if readers else min(svc.modules)
    far_candidates = sorted(
        m for m in legacy.modules if model.module_index[m].layer == DATA_ACCESS
    ) or sorted(legacy.modules)
    if far_candidates:
        far = far_candidates[0]
        edges |= {CallEdge(near, far, API, 1, GLUE), CallEdge(far, near, API, 1, GLUE)}
    record = GlueRecord(ctx, svc.id, legacy_id, tuple(mapping))
    return model.evolve(glue=model.glue | {record}, edges=edges)


def _add_route(model: SystemModel, step: MigrationStep) -> SystemModel:
    svc = _require_extracted(model, step.context)
    table = RouteTable.of(model.routes)
    existing = table.get(step.path)
    if existing is not None:
        if existing.extracted_target is not None:
            raise PreconditionFailed(f"route {step.path!r} already shifts to {existing.extracted_target!r}")
        entry = replace(existing, extracted_target=svc.id, shift_percent=0)
        return model.evolve(routes=(model.routes - {existing}) | {entry})
    covering = table.match(step.path)
    legacy = covering.legacy_target if covering else monolith_id(model)
    return model.evolve(routes=model.routes | {RouteEntry(step.path, legacy, svc.id, 0)})


def _mirror(model: SystemModel, step: MigrationStep) -> SystemModel:
    _require_extracted(model, step.context)
    hoisted = dbsplit.hoist_constraints(model, step.context)
    return dbsplit.mirror_schema(hoisted, step.context)


def _start_sync(model: SystemModel, step: MigrationStep, source_log=()) -> SystemModel:
    model = dbsplit.start_sync(model, step.context)
    state = dbsplit.sync_state(model, step.context)
    replica = dbsplit.RowStore.empty(model.tables_by_db.get(state.target_db, {}))
    _, state = dbsplit.sync_until_quiescent(source_log, replica, state)
    return dbsplit.publish_sync(model, state)


def _cutover(model: SystemModel, step: MigrationStep) -> SystemModel:
    return dbsplit.cutover(model, step.context, fault=step.fault)


def _shift(model: SystemModel, step: MigrationStep) -> SystemModel:
    table = RouteTable.of(model.routes)
    updated = set_shift(table, step.path, step.percent)
    return model.evolve(routes=updated.entries)


def _remove_glue(model: SystemModel, step: MigrationStep) -> SystemModel:
    svc = _require_extracted(model, step.context)
    record = model.glue_for_service(svc.id)
    if record is None:
        raise PreconditionFailed(f"no glue for {step.context!r}")
    for st in model.sync:
        if st.context == step.context and st.mode != CUTOVER:
            raise PreconditionFailed(f"glue still carries data: replica {st.target_db!r} is {st.mode}")
    edges = {
        e for e in model.edges
        if not (e.role == GLUE and (e.src in svc.modules or e.dst in svc.modules))
    }
    return model.evolve(glue=model.glue - {record}, edges=edges)


_HANDLERS = {
    FREEZE_MONOLITH: _freeze,
    SPLIT_FRONTEND: _split_frontend,
    EXTRACT_SERVICE: _extract,
    ADD_GLUE_CODE: _glue,
    ADD_GATEWAY_ROUTE: _add_route,
    MIRROR_TABLES: _mirror,
    START_SYNC: _start_sync,
    CUTOVER_STEP: _cutover,
    SHIFT_TRAFFIC: _shift,
    REMOVE_GLUE: _remove_glue,
}

_NEEDS = {
    EXTRACT_SERVICE: ("context",),
    ADD_GLUE_CODE: ("context",),
    ADD_GATEWAY_ROUTE: ("path", "context"),
    MIRROR_TABLES: ("context",),
    START_SYNC: ("context",),
    CUTOVER_STEP: ("context",),
    SHIFT_TRAFFIC: ("path", "percent"),
    REMOVE_GLUE: ("context",),
}


# -- journal -----------------------------------------------------------------


Diff = dict[str, tuple[frozenset, frozenset]]


def diff_models(before: SystemModel, after: SystemModel) -> Diff:
    out = {}
    for name in COLLECTIONS:
        old, new = getattr(before, name), getattr(after, name)
        if old != new:
            out[name] = (old - new, new - old)
    return out


@dataclass(frozen=True)
class JournalEntry:
    step: MigrationStep
    diff: Diff


@dataclass
class Journal:
    """Applied steps, newest last. One writer at a time."""

    entries: list[JournalEntry] = field(default_factory=list)

    @property
    def steps(self) -> list[MigrationStep]:
        return [e.step for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def check_next(self, step: MigrationStep) -> None:
        problems = check_order([*self.steps, step], complete=False)
        if problems:
            raise PreconditionFailed(f"out of plan order: {problems[0]}")


def apply_step(
    model: SystemModel,
    step: MigrationStep,
    journal: Journal | None = None,
    source_log=(),
) -> SystemModel:
    """Return the model after ``step``; the input model is left untouched.

    ``source_log`` feeds StartSync; by default the replica drains an empty log.
    """
    handler = _HANDLERS.get(step.kind)
    if handler is None:
        raise UnknownStep(f"unknown step kind {step.kind!r}")
    missing = [p for p in _NEEDS.get(step.kind, ()) if getattr(step, p) is None]
    if missing:
        raise PreconditionFailed(f"{step.kind} needs {missing}")
    if journal is not None:
        journal.check_next(step)
    if step.kind == START_SYNC:
        after = _start_sync(model, step, source_log)
    else:
        after = handler(model, step)
    if journal is not None:
        journal.entries.append(JournalEntry(step, diff_models(model, after)))
    return after


def rollback_step(model: SystemModel, step: MigrationStep, journal: Journal) -> SystemModel:
    """Undo ``step``, which must be the most recent journal entry."""
    if not journal.entries:
        raise NothingToRollback("journal is empty")
    entry = journal.entries[-1]
    if entry.step != step:
        raise NotLastApplied(f"{step} is not the last applied step ({entry.step} is)")
    changes = {}
    for name, (removed, added) in entry.diff.items():
        current = getattr(model, name)
        if not added <= current or removed & current:
            raise NotLastApplied(f"model changed since {step} was applied ({name})")
        changes[name] = (current - added) | removed
    journal.entries.pop()
    return model.evolve(**changes)


class Migration:
    """A model plus the journal of steps applied to it."""

    def __init__(self, model: SystemModel):
        self.initial = model
        self.model = model
        self.journal = Journal()

    def apply(self, step: MigrationStep, source_log=()) -> SystemModel:
        self.model = apply_step(self.model, step, self.journal, source_log)
        return self.model

    def rollback(self) -> SystemModel:
        if not self.journal.entries:
            raise NothingToRollback("journal is empty")
        self.model = rollback_step(self.model, self.journal.entries[-1].step, self.journal)
        return self.model


# -- generation --------------------------------------------------------------


def generate_plan(
    model: SystemModel, target: str, shifts: Iterable[int] = DEFAULT_SHIFTS
) -> MigrationPlan:
    """Plan the strangler-fig extraction of one bounded context."""
    home = _context_home(model, target)
    if dbsplit.extracted_service(model, target) == home:
        raise AlreadyExtracted(f"context {target!r} already owns service {home!r}")
    shifts = sorted(set(shifts))
    if not shifts or shifts[-1] != 100 or shifts[0] < 0:
        raise ValueError(f"shift schedule {shifts} must be within [0, 100] and end at 100")

    paths = _endpoint_paths(model, target)
    kinds: list[dict] = [
        {"kind": FREEZE_MONOLITH},
        {"kind": SPLIT_FRONTEND},
        {"kind": EXTRACT_SERVICE, "context": target},
        {"kind": ADD_GLUE_CODE, "context": target},
    ]
    kinds += [{"kind": ADD_GATEWAY_ROUTE, "path": p, "context": target} for p in paths]
    if dbsplit.source_database(model, target) is not None:
        kinds += [
            {"kind": MIRROR_TABLES, "context": target},
            {"kind": START_SYNC, "context": target},
            {"kind": CUTOVER_STEP, "context": target},
        ]
    kinds += [{"kind": SHIFT_TRAFFIC, "path": p, "percent": pct} for pct in shifts for p in paths]
    kinds.append({"kind": REMOVE_GLUE, "context": target})
    steps = tuple(MigrationStep(i, **k) for i, k in enumerate(kinds))
    problems = check_order(steps)
    assert not problems, problems
    return MigrationPlan(target, steps)
