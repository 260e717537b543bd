"""Seeded random monolith models and traces for property and acceptance tests."""

from __future__ import annotations

import random
from collections import defaultdict, deque

from stranglerkit.model import (
    BUSINESS_LOGIC,
    DATA_ACCESS,
    DATABASE_LAYER,
    LOCAL,
    USER_INTERFACE,
    CallEdge,
    DataAccess,
    Database,
    Endpoint,
    ForeignKey,
    ModuleNode,
    Request,
    RouteEntry,
    Service,
    SystemModel,
    Table,
)

MONOLITH = "monolith"
DB = "db-main"


def random_model(rng: random.Random, max_contexts: int = 5) -> SystemModel:
    n = rng.randint(2, max_contexts)
    contexts = [f"C{i}" for i in range(n)]
    modules, edges, access = [], set(), set()
    logic, data_holder = {}, {}
    for c in contexts:
        low = c.lower()
        modules.append(ModuleNode(f"{low}.ui", USER_INTERFACE, c))
        modules.append(ModuleNode(f"{low}.logic", BUSINESS_LOGIC, c))
        edges.add(CallEdge(f"{low}.ui", f"{low}.logic", LOCAL, rng.randint(1, 3)))
        logic[c] = f"{low}.logic"
        data_holder[c] = f"{low}.logic"
        if rng.random() < 0.7:
            modules.append(ModuleNode(f"{low}.data", DATA_ACCESS, c))
            edges.add(CallEdge(f"{low}.logic", f"{low}.data", LOCAL, rng.randint(1, 3)))
            data_holder[c] = f"{low}.data"
    for a in contexts:
        for b in contexts:
            if a != b and rng.random() < 0.3:
                edges.add(CallEdge(logic[a], logic[b], LOCAL, rng.randint(1, 3)))

    tables, owners = [], {}
    for c in contexts:
        for j in range(rng.randint(0, 2)):
            name = f"t_{c.lower()}_{j}"
            tables.append(name)
            owners[name] = c
            access.add(DataAccess(data_holder[c], name, DB))
    lifecycle = {}
    for name in tables:
        others = [c for c in contexts if c != owners[name]]
        if others and rng.random() < 0.3:
            other = rng.choice(others)
            access.add(DataAccess(data_holder[other], name, DB))
            lifecycle[name] = rng.choice([owners[name], other])
        elif rng.random() < 0.3:
            lifecycle[name] = owners[name]

    fks, fk_cols = set(), defaultdict(list)
    for name in tables:
        if len(tables) > 1 and rng.random() < 0.4:
            target = rng.choice([t for t in tables if t != name])
            col = f"{target}_id"
            fk_cols[name].append(col)
            fks.add(ForeignKey(name, col, target, DB, DB, DATABASE_LAYER))
    table_records = [
        Table(name, ("id", "value", *fk_cols[name]), "id", DB, lifecycle_owner=lifecycle.get(name))
        for name in tables
    ]

    endpoints = [Endpoint(f"/{c.lower()}/{k}", f"{c.lower()}.ui") for c in contexts for k in ("home", "items")]
    return SystemModel(
        services=[Service(MONOLITH, frozenset(m.id for m in modules), DB)],
        modules=modules,
        databases=[Database(DB)],
        tables=table_records,
        edges=edges,
        foreign_keys=fks,
        data_access=access,
        endpoints=endpoints,
        routes=[RouteEntry("/", MONOLITH)],
    )


def reachable_tables(model: SystemModel, start: str) -> list[str]:
    adj = defaultdict(list)
    for e in model.edges:
        adj[e.src].append(e.dst)
    by_module = defaultdict(set)
    for a in model.data_access:
        by_module[a.module].add(a.table)
    seen, queue, found = {start}, deque([start]), set()
    while queue:
        u = queue.popleft()
        found |= by_module[u]
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return sorted(found)


def random_trace(rng: random.Random, model: SystemModel, length: int = 30) -> list[Request]:
    options = []
    for ep in sorted(model.endpoints, key=lambda e: e.path):
        for t in reachable_tables(model, ep.module):
            options.append((ep.path, t))
    trace = []
    if not options:
        return trace
    for seq in range(1, length + 1):
        path, table = rng.choice(options)
        op = "write" if rng.random() < 0.35 else "read"
        trace.append(Request(seq, path, f"k{rng.randint(0, 20)}", op, table, f"r{rng.randint(0, 4)}"))
    return trace


def candidate_target(rng: random.Random, model: SystemModel) -> str:
    return rng.choice(sorted({m.context for m in model.modules}))
