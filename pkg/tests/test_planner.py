from __future__ import annotations

import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from generators import candidate_target, random_model
from stranglerkit import dbsplit, planner
from stranglerkit.errors import (
    AlreadyExtracted,
    NothingToRollback,
    NotLastApplied,
    PreconditionFailed,
    UnknownContext,
    UnknownStep,
)
from stranglerkit.model import (
    API,
    BUSINESS_LOGIC,
    FRONTEND_SERVICE,
    GLUE,
    LOCAL,
    CallEdge,
    ModuleNode,
    validate,
)
from stranglerkit.planner import Journal, MigrationStep, apply_step, rollback_step

CANONICAL = [
    "FreezeMonolith",
    "SplitFrontend",
    "ExtractService",
    "AddGlueCode",
    "AddGatewayRoute",
    "MirrorTables",
    "StartSync",
    "Cutover",
    "ShiftTraffic",
    "RemoveGlue",
]


def _pairwise_violations(steps) -> list[tuple]:
    """Independent checker: every pair (i < j) must respect the canonical kind order."""
    rank = {k: i for i, k in enumerate(CANONICAL)}
    bad = [(a.id, b.id) for a, b in itertools.combinations(steps, 2) if rank[a.kind] > rank[b.kind]]
    cutovers = [s for s in steps if s.kind == "Cutover"]
    syncs = [s for s in steps if s.kind == "StartSync"]
    if len(cutovers) > 1 or (cutovers and not any(s.id < cutovers[0].id for s in syncs)):
        bad.append(("cutover",))
    shifts = [s for s in steps if s.kind == "ShiftTraffic"]
    for path in {s.path for s in shifts}:
        pcts = [s.percent for s in shifts if s.path == path]
        if pcts != sorted(pcts) or pcts[-1] != 100:
            bad.append(("shift", path))
    return bad


def test_fig3_plan_shape(fig3_plan):
    kinds = [s.kind for s in fig3_plan]
    assert kinds == CANONICAL[:8] + ["ShiftTraffic"] * 3 + ["RemoveGlue"]
    assert [s.percent for s in fig3_plan if s.kind == "ShiftTraffic"] == [10, 50, 100]
    assert [s.id for s in fig3_plan] == list(range(len(kinds)))
    assert len(set(kinds)) == 10
    assert _pairwise_violations(fig3_plan.steps) == []


def test_plan_errors(fig3, fig3_migrated):
    with pytest.raises(UnknownContext):
        planner.generate_plan(fig3, "Z")
    with pytest.raises(AlreadyExtracted):
        planner.generate_plan(fig3_migrated, "A")
    with pytest.raises(ValueError):
        planner.generate_plan(fig3, "A", shifts=(10, 50))


def test_context_without_tables_skips_database_steps():
    for seed in range(300):
        model = random_model(random.Random(seed))
        for ctx in sorted(model.contexts):
            if not dbsplit.related_tables(model, ctx):
                kinds = {s.kind for s in planner.generate_plan(model, ctx)}
                assert not kinds & {"MirrorTables", "StartSync", "Cutover"}
                return
    pytest.fail("generator never produced a table-free context")


@pytest.mark.parametrize("seed", range(100))
def test_generated_plans_pass_independent_order_check(seed):
    rng = random.Random(seed)
    model = random_model(rng)
    plan = planner.generate_plan(model, candidate_target(rng, model))
    assert _pairwise_violations(plan.steps) == []
    assert planner.check_order(plan.steps) == []


def test_plan_json_round_trip(fig3_plan):
    again = planner.load_plan(planner.plan_to_json(fig3_plan))
    assert again.steps == fig3_plan.steps and again.target == "A"


def test_unknown_kind_in_plan_file():
    with pytest.raises(UnknownStep):
        planner.load_plan('[{"id": 0, "kind": "Teleport", "params": {}}]')
    with pytest.raises(UnknownStep):
        apply_step(random_model(random.Random(0)), MigrationStep(0, "Teleport"))


def test_extract_needs_freeze(fig3):
    with pytest.raises(PreconditionFailed, match="[Ff]reeze|frozen"):
        apply_step(fig3, MigrationStep(0, "ExtractService", context="A"))


def test_extract_converts_crossing_edges(fig3):
    frozen = apply_step(fig3, MigrationStep(0, "FreezeMonolith"))
    after = apply_step(frozen, MigrationStep(1, "ExtractService", context="A"))
    assert len(after.services) == 2
    svc = after.service_index["svc-A"]
    assert svc.modules == {"a.ui", "a.logic", "a.data"}
    for e in after.edges:
        crossing = (e.src in svc.modules) != (e.dst in svc.modules)
        assert e.kind == (API if crossing else LOCAL)
    assert any(e.kind == API for e in after.edges)
    assert validate(after) == []
    with pytest.raises(AlreadyExtracted):
        apply_step(after, MigrationStep(2, "ExtractService", context="A"))


def test_freeze_is_idempotent_and_blocks_new_work(fig3):
    once = apply_step(fig3, MigrationStep(0, "FreezeMonolith"))
    assert apply_step(once, MigrationStep(0, "FreezeMonolith")) == once
    mono = once.service_index["monolith"]
    grown = once.evolve(
        modules=once.modules | {ModuleNode("a.new", BUSINESS_LOGIC, "A")},
        services=(once.services - {mono}) | {type(mono)(mono.id, mono.modules | {"a.new"}, mono.database, mono.frozen)},
    )
    assert "frozen-monolith" in {v.rule for v in validate(grown)}
    rewired = once.evolve(edges=once.edges | {CallEdge("a.data", "f.data", LOCAL)})
    assert "frozen-monolith" in {v.rule for v in validate(rewired)}


def test_split_frontend_moves_every_ui_module(fig3):
    after = apply_step(apply_step(fig3, MigrationStep(0, "FreezeMonolith")), MigrationStep(1, "SplitFrontend"))
    front = after.service_index[FRONTEND_SERVICE]
    assert front.modules == {m.id for m in fig3.modules if m.layer == "user-interface"}
    assert validate(after) == []


def test_add_route_starts_at_zero(fig3_plan, fig3):
    m = planner.Migration(fig3)
    for step in fig3_plan:
        m.apply(step)
        if step.kind == "AddGatewayRoute":
            break
    entry = next(r for r in m.model.routes if r.path_prefix == "/a")
    assert (entry.legacy_target, entry.extracted_target, entry.shift_percent) == ("monolith", "svc-A", 0)


def test_glue_record_and_edges(fig3, fig3_plan):
    m = planner.Migration(fig3)
    for step in fig3_plan.steps[:4]:
        m.apply(step)
    (glue,) = m.model.glue
    assert (glue.context, glue.service, glue.legacy_service) == ("A", "svc-A", "monolith")
    assert dict(glue.field_mapping)["accounts.email"] == "accounts_email"
    pair = [e for e in m.model.edges if e.role == GLUE]
    assert len(pair) == 2 and {(e.src, e.dst) for e in pair} == {(pair[0].src, pair[0].dst), (pair[0].dst, pair[0].src)}


def test_full_plan_end_state(fig3, fig3_migrated):
    assert validate(fig3_migrated) == []
    assert dbsplit.verify_isolation(fig3_migrated) == []
    assert not fig3_migrated.glue
    assert not [e for e in fig3_migrated.edges if e.role == GLUE]
    backend = lambda m: {s.id for s in m.services if s.id != FRONTEND_SERVICE}  # noqa: E731
    assert len(backend(fig3_migrated)) == len(backend(fig3)) + 1


def test_rollback_examples(fig3):
    journal = Journal()
    with pytest.raises(NothingToRollback):
        rollback_step(fig3, MigrationStep(0, "FreezeMonolith"), journal)
    frozen = apply_step(fig3, MigrationStep(0, "FreezeMonolith"), journal)
    extracted = apply_step(frozen, MigrationStep(1, "ExtractService", context="A"), journal)
    with pytest.raises(NotLastApplied):
        rollback_step(extracted, MigrationStep(0, "FreezeMonolith"), journal)
    assert rollback_step(extracted, MigrationStep(1, "ExtractService", context="A"), journal) == frozen
    assert rollback_step(frozen, MigrationStep(0, "FreezeMonolith"), journal) == fig3


def test_journal_rejects_out_of_order_steps(fig3, fig3_plan):
    journal = Journal()
    apply_step(fig3, fig3_plan.steps[0], journal)
    with pytest.raises(PreconditionFailed, match="order"):
        apply_step(fig3, fig3_plan.step(7), journal)


def test_apply_never_mutates_input(fig3, fig3_plan):
    snapshot = hash(fig3), fig3
    m = planner.Migration(fig3)
    for step in fig3_plan:
        m.apply(step)
    assert (hash(fig3), fig3) == snapshot
    assert m.initial is fig3


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 14))
def test_apply_then_rollback_prefix_is_identity(seed, k):
    rng = random.Random(seed)
    model = random_model(rng)
    plan = planner.generate_plan(model, candidate_target(rng, model))
    migration = planner.Migration(model)
    states = [model]
    for step in plan.steps[:k]:
        states.append(migration.apply(step))
        assert validate(states[-1]) == []
    for expected in reversed(states[:-1]):
        assert migration.rollback() == expected
    with pytest.raises(NothingToRollback):
        migration.rollback()


def test_cutover_step_with_fault_flag_round_trips(fig3_plan):
    step = MigrationStep(7, "Cutover", context="A", fault="skip-legacy-rewrite")
    assert planner.load_plan(planner.plan_to_json([step])).steps == (step,)


def test_missing_parameters_are_rejected(fig3):
    with pytest.raises(PreconditionFailed, match="needs"):
        apply_step(fig3, MigrationStep(0, "ShiftTraffic", path="/a"))
    with pytest.raises(PreconditionFailed):
        apply_step(fig3, MigrationStep(0, "AddGlueCode"))
