"""``stranglerkit`` command line.

Exit status: 0 on success, 1 when the command ran but reported findings
(validation errors, isolation violations, divergence, failed preconditions),
2 on usage errors such as unknown subcommands or missing files.
"""

from __future__ import annotations

import argparse
import hashlib
import http.client
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable

from stranglerkit import analysis, dbsplit, io, planner, simulator
from stranglerkit.discovery import DEFAULT_TIMEOUT, Registry
from stranglerkit.errors import NotLastApplied, NothingToRollback, StranglerError, ValidationError
from stranglerkit.gateway.routing import RouteTable, bucket, route
from stranglerkit.gateway.server import (
    DEFAULT_FILTERS,
    PRE,
    REJECT_UNAUTHENTICATED,
    Filter,
    Gateway,
    GatewayServer,
    parse_listen,
)
from stranglerkit.model import Request, SystemModel, validate
from stranglerkit.resilience import BreakerConfig, CircuitBreaker

SEED_ENV = "STRANGLERKIT_SEED"
EXIT_OK, EXIT_FINDINGS, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class Output:
    def __init__(self, as_json: bool):
        self.as_json = as_json

    def emit(self, doc, human: Callable[[], str]) -> None:
        if self.as_json:
            print(json.dumps(doc, indent=2, sort_keys=True))
        else:
            print(human())


# -- argument helpers -----------------------------------------------------------


def _read(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p.read_text("utf-8")


def _model(args) -> SystemModel:
    return io.load_model(_read(args.model))


def _write_model(model: SystemModel, path: str) -> None:
    Path(path).write_text(io.serialize(model), "utf-8")


def resolve_seed(flag: int | None, environ=os.environ) -> int:
    """Flag beats environment beats the default of 0."""
    if flag is not None:
        return flag
    raw = environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _model_digest(model: SystemModel) -> str:
    return hashlib.sha256(io.serialize(model).encode()).hexdigest()


def _violations_text(violations) -> str:
    if not violations:
        return "no violations"
    return "\n".join(f"{v.rule}: {' '.join(map(str, v.ids))}  {v.message}" for v in violations)


# -- subcommands ----------------------------------------------------------------


def cmd_validate(args, out: Output) -> int:
    text = _read(args.model)
    try:
        model = io.model_from_dict(io.parse_json(text, "model"))
        violations = validate(model)
    except ValidationError as exc:
        violations = exc.violations
    out.emit({"violations": [v.as_dict() for v in violations]}, lambda: _violations_text(violations))
    return EXIT_FINDINGS if violations else EXIT_OK


def cmd_analyze(args, out: Output) -> int:
    model = _model(args)
    graph = analysis.build_context_graph(model, weighted=not args.unweighted)
    scores = {s.context: s for s in analysis.coupling_scores(graph)}
    ranking = analysis.rank_candidates(graph)
    doc = {"ranking": ranking, "scores": [scores[c].as_dict() for c in ranking]}
    if args.infer:
        doc["inferred_contexts"] = analysis.infer_contexts(model, seed=resolve_seed(args.seed), threshold=args.threshold)

    def human() -> str:
        lines = [f"{i}. {c}  in={scores[c].in_degree} out={scores[c].out_degree} total={scores[c].total}"
                 for i, c in enumerate(ranking, 1)]
        if args.infer:
            lines.append("inferred contexts (heuristic, review before use):")
            lines += [f"  {m}: {c}" for m, c in sorted(doc["inferred_contexts"].items())]
        return "\n".join(lines)

    out.emit(doc, human)
    return EXIT_OK


def cmd_plan(args, out: Output) -> int:
    model = _model(args)
    shifts = [int(x) for x in args.shifts.split(",")] if args.shifts else planner.DEFAULT_SHIFTS
    plan = planner.generate_plan(model, args.target, shifts)
    text = planner.plan_to_json(plan)
    if args.output:
        Path(args.output).write_text(text, "utf-8")
    out.emit([s.to_dict() for s in plan], lambda: "\n".join(str(s) for s in plan))
    return EXIT_OK


def _journal_path(args) -> Path:
    return Path(args.journal or args.model + ".journal.json")


def _load_journal(path: Path) -> dict:
    if not path.exists():
        return {"entries": []}
    return json.loads(path.read_text("utf-8"))


def cmd_apply(args, out: Output) -> int:
    model = _model(args)
    plan = planner.load_plan(_read(args.plan))
    jpath = _journal_path(args)
    journal = _load_journal(jpath)
    applied = [e["step"] for e in journal["entries"]]
    if journal["entries"] and journal["entries"][-1]["after"] != _model_digest(model):
        raise NotLastApplied(f"{args.model} changed since the journal's last step")
    if args.step is None:
        done = {s["id"] for s in applied}
        pending = [s for s in plan if s.id not in done]
        if not pending:
            raise StranglerError("every plan step is already applied")
        step = pending[0]
    else:
        step = plan.step(args.step)
    history = planner.Journal()
    history.entries = [planner.JournalEntry(planner.MigrationStep(s["id"], s["kind"], **s["params"]), {}) for s in applied]
    history.check_next(step)
    after = planner.apply_step(model, step)
    journal["entries"].append({"step": step.to_dict(), "before": io.model_to_dict(model), "after": _model_digest(after)})
    _write_model(after, args.output or args.model)
    jpath.write_text(json.dumps(journal, indent=1, sort_keys=True), "utf-8")
    out.emit({"applied": step.to_dict(), "journal_length": len(journal["entries"])}, lambda: f"applied {step}")
    return EXIT_OK


def cmd_rollback(args, out: Output) -> int:
    model = _model(args)
    jpath = _journal_path(args)
    journal = _load_journal(jpath)
    if not journal["entries"]:
        raise NothingToRollback("journal is empty")
    last = journal["entries"][-1]
    if args.step is not None and last["step"]["id"] != args.step:
        raise NotLastApplied(f"step {args.step} is not the last applied step ({last['step']['id']} is)")
    if last["after"] != _model_digest(model):
        raise NotLastApplied(f"{args.model} changed since step {last['step']['id']} was applied")
    before = io.model_from_dict(last["before"])
    journal["entries"].pop()
    _write_model(before, args.output or args.model)
    jpath.write_text(json.dumps(journal, indent=1, sort_keys=True), "utf-8")
    out.emit({"rolled_back": last["step"], "journal_length": len(journal["entries"])},
             lambda: f"rolled back step {last['step']['id']} {last['step']['kind']}")
    return EXIT_OK


def cmd_simulate(args, out: Output) -> int:
    model = _model(args)
    trace = io.load_trace(_read(args.trace), model)
    seed = resolve_seed(args.seed)
    if args.plan is None:
        report = simulator.execute_trace(model, trace, seed, replicas=args.replicas)
        doc = report.to_dict()
        out.emit(doc, lambda: "\n".join(
            [f"{len(report.responses)} responses"] + [f"  {k}: {v}" for k, v in doc["metrics"].items()]
        ))
        return EXIT_OK
    plan = planner.load_plan(_read(args.plan))
    run = simulator.run_migration(model, plan, trace, seed)
    doc = run.to_dict()

    def human() -> str:
        lines = []
        for s in run.steps:
            verdict = "equal" if s.verdict.equal else f"DIVERGED at seq {s.verdict.seq}"
            delta = " ".join(f"{k}={v:+d}" for k, v in s.delta.items() if v)
            lines.append(f"{s.step}: {verdict}{'  (rolled back)' if s.rolled_back else ''}  {delta}".rstrip())
        lines.append(_violations_text(run.violations) if not run.diverged else "migration halted")
        return "\n".join(lines)

    out.emit(doc, human)
    return EXIT_FINDINGS if run.diverged or run.violations else EXIT_OK


def cmd_db(args, out: Output) -> int:
    model = _model(args)
    if args.db_command == "verify":
        violations = dbsplit.verify_isolation(model)
        out.emit({"violations": [v.as_dict() for v in violations]}, lambda: _violations_text(violations))
        return EXIT_FINDINGS if violations else EXIT_OK
    if args.db_command == "sync-status":
        states = sorted(model.sync, key=lambda s: s.target_db)
        doc = [{"target_db": s.target_db, "source_db": s.source_db, "context": s.context,
                "applied_seq": s.applied_seq, "mode": s.mode} for s in states]
        out.emit(doc, lambda: "\n".join(
            f"{s.target_db} <- {s.source_db} [{s.context}] {s.mode} seq={s.applied_seq}" for s in states
        ) or "no replicas")
        return EXIT_OK
    if args.db_command == "tables":
        src, moved = dbsplit.tables_to_move(model, args.context)
        doc = {"source_db": src, "related": sorted(dbsplit.related_tables(model, args.context)),
               "move": sorted(moved), "shared": dbsplit.shared_tables(model, args.context)}
        out.emit(doc, lambda: f"source {src}\nrelated {', '.join(doc['related'])}\nmove {', '.join(doc['move'])}")
        return EXIT_OK
    if args.db_command == "mirror":
        after = dbsplit.mirror_schema(dbsplit.hoist_constraints(model, args.context), args.context)
    elif args.db_command == "sync":
        if dbsplit.sync_state(model, args.context).mode == "mirrored":
            model = dbsplit.start_sync(model, args.context)
        state = dbsplit.sync_state(model, args.context)
        log = list(dbsplit.read_changelog(_read(args.changelog).splitlines())) if args.changelog else []
        replica, state = dbsplit.sync_until_quiescent(log, dbsplit.RowStore.empty(model.tables_by_db[state.target_db]), state)
        after = dbsplit.publish_sync(model, state)
    else:
        after = dbsplit.cutover(model, args.context, fault=args.fault)
    _write_model(after, args.output or args.model)
    st = dbsplit.sync_state(after, args.context)
    out.emit({"context": args.context, "target_db": st.target_db, "mode": st.mode, "applied_seq": st.applied_seq},
             lambda: f"{st.target_db}: {st.mode} (seq {st.applied_seq})")
    return EXIT_OK


def cmd_route(args, out: Output) -> int:
    model = _model(args)
    decision = route(RouteTable.of(model.routes), Request(0, args.path, args.key, "read", "", ""))
    doc = {"target": decision.target, "prefix": decision.prefix, "extracted": decision.extracted,
           "bucket": bucket(args.key)}
    out.emit(doc, lambda: f"{decision.target} (prefix {decision.prefix}, bucket {doc['bucket']})")
    return EXIT_OK


def cmd_serve(args, out: Output) -> int:
    model = _model(args)
    host, port = parse_listen(args.listen)
    registry = Registry(timeout=args.health_timeout)
    breaker = CircuitBreaker(BreakerConfig(args.failure_threshold, args.cooldown, args.call_timeout, args.cache_size))
    filters = list(DEFAULT_FILTERS)
    if args.require_token:
        filters.insert(0, Filter("auth", PRE, REJECT_UNAUTHENTICATED))
    gateway = Gateway(RouteTable.of(model.routes), registry, breaker, filters=filters, token=args.token)
    for spec in args.register or ():
        service, _, rest = spec.partition("=")
        instance, _, address = rest.partition("@")
        if not (service and instance and address):
            raise UsageError(f"--register wants service=instance@host:port, got {spec!r}")
        registry.register(service, instance, address)
    server = GatewayServer(gateway, host, port)
    print(f"listening on {server.address}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def _admin_call(gateway: str, method: str, path: str, body: dict | None = None) -> tuple[int, object]:
    host, port = parse_listen(gateway)
    conn = http.client.HTTPConnection(host, port, timeout=10)
    try:
        payload = json.dumps(body).encode() if body is not None else b""
        conn.request(method, path, body=payload, headers={"Content-Type": "application/json"})
        reply = conn.getresponse()
        return reply.status, json.loads(reply.read() or b"null")
    finally:
        conn.close()


def cmd_registry(args, out: Output) -> int:
    base = f"/registry/{args.service}"
    if args.registry_command == "register":
        status, doc = _admin_call(args.gateway, "POST", base + "/instances",
                                  {"instance_id": args.id, "address": args.address})
    elif args.registry_command == "deregister":
        status, doc = _admin_call(args.gateway, "DELETE", f"{base}/instances/{args.id}")
    elif args.registry_command == "heartbeat":
        status, doc = _admin_call(args.gateway, "PUT", f"{base}/instances/{args.id}/heartbeat")
    else:
        status, doc = _admin_call(args.gateway, "GET", base)
    out.emit(doc, lambda: json.dumps(doc, indent=2))
    return EXIT_OK if status < 400 else EXIT_FINDINGS


def cmd_shift(args, out: Output) -> int:
    from urllib.parse import quote

    status, doc = _admin_call(args.gateway, "PUT", f"/admin/routes/{quote(args.prefix, safe='')}/shift",
                              {"percent": args.percent})
    out.emit(doc, lambda: json.dumps(doc, indent=2))
    return EXIT_OK if status < 400 else EXIT_FINDINGS


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("--seed", type=int, default=None, help=f"RNG seed (flag > ${SEED_ENV} > 0)")

    parser = argparse.ArgumentParser(prog="stranglerkit", description="Plan and run strangler-fig migrations.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = add("validate", cmd_validate, "check a model document and list violations")
    p.add_argument("--model", required=True)

    p = add("analyze", cmd_analyze, "rank bounded contexts by coupling, least coupled first")
    p.add_argument("--model", required=True)
    p.add_argument("--unweighted", action="store_true", help="count each crossing edge once")
    p.add_argument("--infer", action="store_true", help="also propose contexts from the call graph")
    p.add_argument("--threshold", type=int, default=0, help="edge weight an inferred link must exceed")

    p = add("plan", cmd_plan, "generate the migration plan for one context")
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--shifts", help="comma-separated traffic shift schedule ending at 100 (default 10,50,100)")
    p.add_argument("-o", "--output", help="write the plan JSON here")

    p = add("apply", cmd_apply, "apply one plan step to a model file, recording it in a journal")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--step", type=int, help="step id (default: the next unapplied step)")
    p.add_argument("--journal", help="journal file (default: <model>.journal.json)")
    p.add_argument("-o", "--output", help="write the new model here instead of in place")

    p = add("rollback", cmd_rollback, "undo the most recently applied step")
    p.add_argument("--model", required=True)
    p.add_argument("--step", type=int, help="refuse unless this is the last applied step")
    p.add_argument("--journal")
    p.add_argument("-o", "--output")

    p = add("simulate", cmd_simulate, "replay a trace, optionally across every step of a plan")
    p.add_argument("--model", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--plan")
    p.add_argument("--replicas", type=int, default=1, help="monolith copies behind a round-robin balancer")

    p = add("db", cmd_db, "database decomposition: tables, mirror, sync, sync-status, cutover, verify")
    p.add_argument("db_command", choices=["tables", "mirror", "sync", "sync-status", "cutover", "verify"])
    p.add_argument("--model", required=True)
    p.add_argument("--context")
    p.add_argument("--changelog", help="JSON-lines change log to drain (sync)")
    p.add_argument("--fault", help=argparse.SUPPRESS)
    p.add_argument("-o", "--output")

    gw = sub.add_parser("gateway", help="run or query the routing gateway")
    gw_sub = gw.add_subparsers(dest="gateway_command", required=True, metavar="ACTION")
    p = gw_sub.add_parser("serve", parents=[common], help="serve the model's routes over HTTP")
    p.set_defaults(func=cmd_serve)
    p.add_argument("--model", required=True)
    p.add_argument("--listen", required=True, help="host:port (port 0 picks a free port)")
    p.add_argument("--register", action="append", metavar="SERVICE=ID@HOST:PORT")
    p.add_argument("--require-token", action="store_true", help="reject requests without a bearer token")
    p.add_argument("--token", help="accepted bearer token (any non-empty token if omitted)")
    p.add_argument("--failure-threshold", type=int, default=5)
    p.add_argument("--cooldown", type=float, default=30.0)
    p.add_argument("--call-timeout", type=float, default=2.0)
    p.add_argument("--cache-size", type=int, default=1024)
    p.add_argument("--health-timeout", type=float, default=DEFAULT_TIMEOUT)
    p = gw_sub.add_parser("route", parents=[common], help="show where a path and key would be routed")
    p.set_defaults(func=cmd_route)
    p.add_argument("--model", required=True)
    p.add_argument("--path", required=True)
    p.add_argument("--key", required=True)
    p = gw_sub.add_parser("shift", parents=[common], help="change a route's shift on a running gateway")
    p.set_defaults(func=cmd_shift)
    p.add_argument("--gateway", required=True, help="host:port of the gateway")
    p.add_argument("--prefix", required=True)
    p.add_argument("--percent", type=int, required=True)

    p = add("registry", cmd_registry, "manage instances in a running gateway's registry")
    p.add_argument("registry_command", choices=["register", "deregister", "heartbeat", "list"])
    p.add_argument("--gateway", required=True, help="host:port of the gateway")
    p.add_argument("--service", required=True)
    p.add_argument("--id")
    p.add_argument("--address")
    return parser


_NEEDS_CONTEXT = {"tables", "mirror", "sync", "cutover"}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    if getattr(args, "db_command", None) in _NEEDS_CONTEXT and not args.context:
        print(f"stranglerkit db {args.db_command}: --context is required", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "registry_command", None) in ("register", "deregister", "heartbeat") and not args.id:
        print(f"stranglerkit registry {args.registry_command}: --id is required", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "registry_command", None) == "register" and not args.address:
        print("stranglerkit registry register: --address is required", file=sys.stderr)
        return EXIT_USAGE
    out = Output(getattr(args, "json", False))
    try:
        return args.func(args, out)
    except UsageError as exc:
        print(f"stranglerkit: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StranglerError as exc:
        if out.as_json:
            doc = {"error": type(exc).__name__, "detail": str(exc)}
            if isinstance(exc, ValidationError):
                doc["violations"] = [v.as_dict() for v in exc.violations]
            print(json.dumps(doc, indent=2, sort_keys=True))
        print(f"stranglerkit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FINDINGS
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"stranglerkit: {exc}", file=sys.stderr)
        return EXIT_FINDINGS
