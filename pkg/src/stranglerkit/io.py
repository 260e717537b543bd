"""Reading and writing model and trace documents."""

from __future__ import annotations

import json
from collections import Counter
from functools import lru_cache
from importlib import resources
from typing import Any

import jsonschema

from stranglerkit.errors import ParseError, ValidationError
from stranglerkit.model import (
    CALL,
    DATABASE_LAYER,
    LOCAL,
    MIRRORED,
    READ_WRITE,
    CallEdge,
    DataAccess,
    Database,
    Endpoint,
    ForeignKey,
    Freeze,
    GlueRecord,
    ModuleNode,
    Request,
    RouteEntry,
    Service,
    SyncState,
    SystemModel,
    Table,
    Violation,
    check_trace,
    ordered,
    validate,
)


@lru_cache(maxsize=None)
def schema(name: str) -> dict:
    text = resources.files("stranglerkit.schemas").joinpath(f"{name}.schema.json").read_text("utf-8")
    return json.loads(text)


def parse_json(text: str | bytes, schema_name: str) -> Any:
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, schema(schema_name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ParseError(f"{where}: {exc.message}") from exc
    return doc


def _resolve_db(name: str, given: str | None, homes: dict[str, list[str]], errors: list[Violation]) -> str:
    if given is not None:
        return given
    dbs = homes.get(name, [])
    if len(dbs) == 1:
        return dbs[0]
    rule = "unknown-table" if not dbs else "ambiguous-table"
    errors.append(Violation(rule, (name,), f"table {name!r} must name its database (candidates: {dbs})"))
    return ""


def model_from_dict(doc: dict) -> SystemModel:
    """Build a model from an already schema-checked document (no validation)."""
    errors: list[Violation] = []
    services = [
        Service(
            id=s["id"],
            modules=frozenset(s["modules"]),
            database=s.get("database"),
            frozen=(
                Freeze(frozenset(s["frozen"]["modules"]), frozenset(tuple(e) for e in s["frozen"]["edges"]))
                if s.get("frozen")
                else None
            ),
        )
        for s in doc["services"]
    ]
    # A module listed by two services is kept twice so validation can name it.
    modules = [ModuleNode(m["id"], m["layer"], m.get("context")) for m in doc["modules"]]
    databases, tables = [], []
    homes: dict[str, list[str]] = {}
    for d in doc["databases"]:
        databases.append(Database(d["id"]))
        for t in d.get("tables", []):
            owner = t.get("owner_db", d["id"])
            if owner != d["id"]:
                errors.append(Violation("table-owner-mismatch", (t["name"], owner), f"table {t['name']!r} listed under {d['id']!r} but owned by {owner!r}"))
            tables.append(Table(
                name=t["name"],
                columns=tuple(t["columns"]),
                primary_key=t["primary_key"],
                owner_db=d["id"],
                access_mode=t.get("access_mode", READ_WRITE),
                lifecycle_owner=t.get("lifecycle_owner"),
            ))
            homes.setdefault(t["name"], []).append(d["id"])
    edges = [
        CallEdge(e["from"], e["to"], e.get("kind", LOCAL), e.get("weight", 1), e.get("role", CALL))
        for e in doc.get("edges", [])
    ]
    fks = [
        ForeignKey(
            from_table=f["from_table"],
            from_column=f["from_column"],
            to_table=f["to_table"],
            from_db=_resolve_db(f["from_table"], f.get("from_db"), homes, errors),
            to_db=_resolve_db(f["to_table"], f.get("to_db"), homes, errors),
            enforcement=f.get("enforcement", DATABASE_LAYER),
        )
        for f in doc.get("foreign_keys", [])
    ]
    access = []
    for a in doc.get("data_access", []):
        if isinstance(a, list):
            a = {"module": a[0], "table": a[1]}
        access.append(DataAccess(
            a["module"], a["table"], _resolve_db(a["table"], a.get("database"), homes, errors), a.get("via")
        ))
    endpoints = [Endpoint(p, m) for p, m in doc.get("endpoints", {}).items()]
    routes = [
        RouteEntry(r["path_prefix"], r["legacy_target"], r.get("extracted_target"), r.get("shift_percent", 0))
        for r in doc.get("routes", [])
    ]
    glue = [
        GlueRecord(g["context"], g["service"], g["legacy_service"], tuple(sorted(g.get("field_mapping", {}).items())))
        for g in doc.get("glue", [])
    ]
    sync = [
        SyncState(s["target_db"], s["source_db"], s["context"], s.get("applied_seq", 0), s.get("mode", MIRRORED))
        for s in doc.get("sync", [])
    ]

    counts = Counter(m.id for m in modules)
    for mid in sorted(k for k, n in counts.items() if n > 1):
        errors.append(Violation("duplicate-module", (mid,), f"module {mid!r} declared twice"))
    if errors:
        raise ValidationError(errors)
    return SystemModel(
        services=services,
        modules=modules,
        databases=databases,
        tables=tables,
        edges=edges,
        foreign_keys=fks,
        data_access=access,
        endpoints=endpoints,
        routes=routes,
        glue=glue,
        sync=sync,
    )


def load_model(text: str | bytes) -> SystemModel:
    """Parse and validate a model document.

    Raises ParseError for malformed documents and ValidationError (carrying
    every violation, the first one named in the message) for invariant
    breaches.
    """
    model = model_from_dict(parse_json(text, "model"))
    violations = validate(model)
    if violations:
        raise ValidationError(violations)
    return model


def model_to_dict(model: SystemModel) -> dict:
    doc: dict[str, Any] = {
        "services": [],
        "modules": [],
        "databases": [],
        "edges": [],
        "foreign_keys": [],
        "data_access": [],
        "endpoints": {},
        "routes": [],
    }
    for s in ordered(model.services):
        rec: dict[str, Any] = {"id": s.id, "modules": sorted(s.modules), "database": s.database}
        if s.frozen is not None:
            rec["frozen"] = {
                "modules": sorted(s.frozen.modules),
                "edges": [list(e) for e in sorted(s.frozen.edges)],
            }
        doc["services"].append(rec)
    for m in ordered(model.modules):
        doc["modules"].append({"id": m.id, "layer": m.layer, "context": m.context})
    for d in ordered(model.databases):
        doc["databases"].append({
            "id": d.id,
            "tables": [
                {
                    "name": t.name,
                    "columns": list(t.columns),
                    "primary_key": t.primary_key,
                    "access_mode": t.access_mode,
                    **({"lifecycle_owner": t.lifecycle_owner} if t.lifecycle_owner else {}),
                }
                for t in ordered(x for x in model.tables if x.owner_db == d.id)
            ],
        })
    for t in ordered(x for x in model.tables if x.owner_db not in {d.id for d in model.databases}):
        # orphan tables cannot be expressed in the nested format
        raise ValidationError([Violation("unknown-database", (t.name, t.owner_db), "table in unknown database")])
    for e in ordered(model.edges):
        rec = {"from": e.src, "to": e.dst, "kind": e.kind, "weight": e.weight}
        if e.role != CALL:
            rec["role"] = e.role
        doc["edges"].append(rec)
    for f in ordered(model.foreign_keys):
        doc["foreign_keys"].append({
            "from_table": f.from_table,
            "from_column": f.from_column,
            "to_table": f.to_table,
            "from_db": f.from_db,
            "to_db": f.to_db,
            "enforcement": f.enforcement,
        })
    for a in ordered(model.data_access):
        rec = {"module": a.module, "table": a.table, "database": a.database}
        if a.via is not None:
            rec["via"] = a.via
        doc["data_access"].append(rec)
    doc["endpoints"] = {e.path: e.module for e in ordered(model.endpoints)}
    for r in ordered(model.routes):
        doc["routes"].append({
            "path_prefix": r.path_prefix,
            "legacy_target": r.legacy_target,
            "extracted_target": r.extracted_target,
            "shift_percent": r.shift_percent,
        })
    if model.glue:
        doc["glue"] = [
            {
                "context": g.context,
                "service": g.service,
                "legacy_service": g.legacy_service,
                "field_mapping": dict(g.field_mapping),
            }
            for g in ordered(model.glue)
        ]
    if model.sync:
        doc["sync"] = [
            {
                "target_db": s.target_db,
                "source_db": s.source_db,
                "context": s.context,
                "applied_seq": s.applied_seq,
                "mode": s.mode,
            }
            for s in ordered(model.sync)
        ]
    return doc


def serialize(model: SystemModel) -> str:
    return json.dumps(model_to_dict(model), indent=2) + "\n"


def load_trace(text: str | bytes, model: SystemModel | None = None) -> list[Request]:
    doc = parse_json(text, "trace")
    trace = [Request(**r) for r in doc]
    if model is not None:
        violations = check_trace(model, trace)
        if violations:
            raise ValidationError(violations)
    return trace


def trace_to_json(trace: list[Request]) -> str:
    return json.dumps(
        [
            {"seq": r.seq, "endpoint": r.endpoint, "key": r.key, "op": r.op, "table": r.table, "row_key": r.row_key}
            for r in trace
        ],
        indent=2,
    ) + "\n"


def bundled(name: str) -> str:
    """Text of a bundled fixture file, e.g. ``bundled("fig3.model")``."""
    return resources.files("stranglerkit.fixtures").joinpath(name).read_text("utf-8")
