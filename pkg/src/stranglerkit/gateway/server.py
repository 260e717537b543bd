"""Request pipeline and HTTP front end for the routing gateway.

``Gateway.handle`` is transport-agnostic: pre filters, routing, instance
selection, the breaker-guarded upstream call and post filters. ``serve`` puts
it behind a threaded HTTP/1.1 server that also exposes the route admin and
registry endpoints.
"""

from __future__ import annotations

import http.client
import json
import logging
import threading
from collections import Counter, deque
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Iterable
from urllib.parse import parse_qs, unquote, urlsplit

from stranglerkit.discovery import InstanceRecord, Registry
from stranglerkit.errors import (
    DuplicateInstance,
    InvalidPercent,
    NoHealthyInstance,
    NoRouteMatched,
    UnknownInstance,
    UnknownRoute,
    UnknownService,
    UpstreamFailure,
)
from stranglerkit.gateway.routing import RouteTable, route, set_shift
from stranglerkit.resilience import CircuitBreaker

log = logging.getLogger("stranglerkit.gateway")

PRE, POST = "pre", "post"
REQUEST_LOGGING = "request-logging"
METRICS_COUNT = "metrics-count"
REJECT_UNAUTHENTICATED = "reject-unauthenticated"
BEHAVIORS = (REQUEST_LOGGING, METRICS_COUNT, REJECT_UNAUTHENTICATED)
OUTCOMES = ("routed_legacy", "routed_extracted", "unrouted", "rejected")


@dataclass(frozen=True)
class Filter:
    name: str
    phase: str
    behavior: str

    def __post_init__(self):
        if self.phase not in (PRE, POST):
            raise ValueError(f"filter phase must be pre or post, got {self.phase!r}")
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"unknown filter behavior {self.behavior!r}")


DEFAULT_FILTERS = (
    Filter("access-log", PRE, REQUEST_LOGGING),
    Filter("response-count", POST, METRICS_COUNT),
)


@dataclass(frozen=True)
class GatewayRequest:
    path: str
    key: str
    method: str = "GET"
    headers: dict = field(default_factory=dict)
    body: bytes = b""

    def digest_source(self) -> list:
        return [self.method, self.path, self.key, self.body.decode("latin-1")]


@dataclass(frozen=True)
class GatewayResponse:
    status: int
    body: bytes = b""
    headers: dict = field(default_factory=dict)


class Rejected(Exception):
    pass


Transport = Callable[[InstanceRecord, GatewayRequest, float], GatewayResponse]


def http_transport(instance: InstanceRecord, request: GatewayRequest, timeout: float) -> GatewayResponse:
    host, _, port = instance.address.rpartition(":")
    conn = http.client.HTTPConnection(host or "127.0.0.1", int(port), timeout=timeout)
    try:
        headers = {"X-Routing-Key": request.key, "Content-Length": str(len(request.body))}
        conn.request(request.method, request.path, body=request.body, headers=headers)
        reply = conn.getresponse()
        body = reply.read()
    finally:
        conn.close()
    if reply.status >= 500:
        raise UpstreamFailure(f"{instance.instance_id} answered {reply.status}")
    return GatewayResponse(reply.status, body, {"Content-Type": reply.getheader("Content-Type", "application/octet-stream")})


class Gateway:
    def __init__(
        self,
        routes: RouteTable,
        registry: Registry,
        breaker: CircuitBreaker | None = None,
        transport: Transport = http_transport,
        filters: Iterable[Filter] = DEFAULT_FILTERS,
        token: str | None = None,
    ):
        self._routes = routes
        self.registry = registry
        self.breaker = breaker or CircuitBreaker()
        self.transport = transport
        self.filters = tuple(filters)
        self.token = token
        self.access_log: deque = deque(maxlen=10_000)
        self._counters = Counter({k: 0 for k in OUTCOMES})
        self._by_target: Counter = Counter()
        self._by_status: Counter = Counter()
        self._lock = threading.Lock()
        self._route_lock = threading.Lock()

    # -- routes --------------------------------------------------------------

    @property
    def routes(self) -> RouteTable:
        return self._routes

    def swap_routes(self, table: RouteTable) -> None:
        with self._route_lock:
            self._routes = table

    def set_shift(self, prefix: str, percent: int) -> RouteTable:
        with self._route_lock:
            self._routes = set_shift(self._routes, prefix, percent)
            return self._routes

    # -- metrics -------------------------------------------------------------

    def _count(self, counter: Counter, key: str) -> None:
        with self._lock:
            counter[key] += 1

    def counters(self) -> dict[str, int]:
        with self._lock:
            return {k: self._counters[k] for k in OUTCOMES}

    def metrics(self) -> dict:
        with self._lock:
            doc = {
                **{k: self._counters[k] for k in OUTCOMES},
                "by_target": dict(sorted(self._by_target.items())),
                "by_status": {str(k): v for k, v in sorted(self._by_status.items())},
            }
        doc["breakers"] = self.breaker.metrics()
        return doc

    # -- pipeline ------------------------------------------------------------

    def _run_filter(self, f: Filter, request: GatewayRequest, response: GatewayResponse | None, target: str | None):
        if f.behavior == REQUEST_LOGGING:
            self.access_log.append((f.name, f.phase, request.method, request.path))
            log.info("%s %s %s %s", f.name, f.phase, request.method, request.path)
        elif f.behavior == METRICS_COUNT:
            if f.phase == POST and response is not None:
                self._count(self._by_status, response.status)
                if target is not None:
                    self._count(self._by_target, target)
        elif f.behavior == REJECT_UNAUTHENTICATED:
            auth = {k.lower(): v for k, v in request.headers.items()}.get("authorization", "")
            scheme, _, credential = auth.partition(" ")
            if scheme.lower() != "bearer" or not credential or (self.token is not None and credential != self.token):
                raise Rejected("missing or invalid bearer token")

    def handle(self, request: GatewayRequest) -> GatewayResponse:
        for f in self.filters:
            if f.phase == PRE:
                try:
                    self._run_filter(f, request, None, None)
                except Rejected as exc:
                    self._count(self._counters, "rejected")
                    return GatewayResponse(401, str(exc).encode(), {"Content-Type": "text/plain"})
        table = self._routes
        try:
            decision = route(table, request)
        except NoRouteMatched:
            self._count(self._counters, "unrouted")
            raise
        self._count(self._counters, "routed_extracted" if decision.extracted else "routed_legacy")
        instance = self.registry.next_instance(decision.target)
        timeout = self.breaker.config.call_timeout
        result = self.breaker.call_with_breaker(
            decision.target, request.digest_source(), lambda _: self.transport(instance, request, timeout)
        )
        upstream = result.response
        headers = {
            **upstream.headers,
            "X-Upstream-Service": decision.target,
            "X-Upstream-Instance": instance.instance_id,
            "X-Provenance": result.provenance,
        }
        response = GatewayResponse(upstream.status, upstream.body, headers)
        for f in self.filters:
            if f.phase == POST:
                self._run_filter(f, request, response, decision.target)
        return response


# -- HTTP front end -----------------------------------------------------------


def _routes_doc(table: RouteTable) -> list[dict]:
    return [
        {
            "path_prefix": e.path_prefix,
            "legacy_target": e.legacy_target,
            "extracted_target": e.extracted_target,
            "shift_percent": e.shift_percent,
        }
        for e in table.entries
    ]


def _make_handler(gateway: Gateway):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        disable_nagle_algorithm = True  # headers and body go out in separate writes

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

        def _reply(self, status: int, body: bytes, headers: dict | None = None) -> None:
            self.send_response(status)
            for k, v in (headers or {}).items():
                self.send_header(k, str(v))
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _json(self, status: int, doc) -> None:
            self._reply(status, json.dumps(doc, sort_keys=True).encode(), {"Content-Type": "application/json"})

        def _body(self) -> bytes:
            length = int(self.headers.get("Content-Length") or 0)
            return self.rfile.read(length) if length else b""

        def _dispatch(self) -> None:
            body = self._body()
            url = urlsplit(self.path)
            path = url.path
            try:
                if path.startswith("/admin/"):
                    return self._admin(path, body)
                if path.startswith("/registry/"):
                    return self._registry(path, body)
                key = self.headers.get("X-Routing-Key") or parse_qs(url.query).get("key", [path])[0]
                request = GatewayRequest(path, key, self.command, dict(self.headers.items()), body)
                response = gateway.handle(request)
                self._reply(response.status, response.body, response.headers)
            except NoRouteMatched as exc:
                self._json(404, {"error": "no-route", "detail": str(exc)})
            except (NoHealthyInstance, UnknownService) as exc:
                self._json(503, {"error": "no-healthy-instance", "detail": str(exc)})
            except UpstreamFailure as exc:
                self._json(502, {"error": "upstream-failure", "detail": str(exc)})
            except (UnknownRoute, UnknownInstance) as exc:
                self._json(404, {"error": type(exc).__name__, "detail": str(exc)})
            except (InvalidPercent, DuplicateInstance, ValueError, KeyError) as exc:
                self._json(400, {"error": type(exc).__name__, "detail": str(exc)})

        def _admin(self, path: str, body: bytes) -> None:
            if path == "/admin/routes" and self.command == "GET":
                return self._json(200, _routes_doc(gateway.routes))
            if path == "/admin/metrics" and self.command == "GET":
                return self._json(200, gateway.metrics())
            if path.startswith("/admin/routes/") and path.endswith("/shift") and self.command == "PUT":
                prefix = unquote(path[len("/admin/routes/") : -len("/shift")])
                if not prefix.startswith("/"):
                    prefix = "/" + prefix
                percent = json.loads(body or b"{}")["percent"]
                return self._json(200, _routes_doc(gateway.set_shift(prefix, percent)))
            self._json(404, {"error": "unknown-admin-endpoint"})

        def _registry(self, path: str, body: bytes) -> None:
            parts = [unquote(p) for p in path.split("/")[2:]]
            reg = gateway.registry
            if len(parts) == 1 and self.command == "GET":
                return self._json(200, [r.to_dict() for r in reg.instances(parts[0])])
            if len(parts) == 2 and parts[1] == "instances" and self.command == "POST":
                doc = json.loads(body or b"{}")
                record = reg.register(parts[0], doc["instance_id"], doc["address"])
                return self._json(201, record.to_dict())
            if len(parts) == 3 and parts[1] == "instances" and self.command == "DELETE":
                reg.deregister(parts[0], parts[2])
                return self._json(200, {"deregistered": parts[2]})
            if len(parts) == 4 and parts[1] == "instances" and parts[3] == "heartbeat" and self.command == "PUT":
                return self._json(200, reg.heartbeat(parts[0], parts[2]).to_dict())
            self._json(404, {"error": "unknown-registry-endpoint"})

        do_GET = do_POST = do_PUT = do_DELETE = do_PATCH = _dispatch

    return Handler


class GatewayServer:
    """Threaded HTTP server around a Gateway, with a background health sweep."""

    def __init__(self, gateway: Gateway, host: str = "127.0.0.1", port: int = 0, sweep_interval: float = 1.0):
        self.gateway = gateway
        self.httpd = ThreadingHTTPServer((host, port), _make_handler(gateway))
        self.httpd.daemon_threads = True
        self.sweep_interval = sweep_interval
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"{host}:{port}"

    def _sweeper(self) -> None:
        while not self._stop.wait(self.sweep_interval):
            for change in self.gateway.registry.sweep():
                log.info("instance %s/%s is now %s", change.service_id, change.instance_id, change.status)

    def start(self) -> GatewayServer:
        for target in (self.httpd.serve_forever, self._sweeper):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def serve_forever(self) -> None:
        threading.Thread(target=self._sweeper, daemon=True).start()
        try:
            self.httpd.serve_forever()
        finally:
            self._stop.set()
            self.httpd.server_close()

    def stop(self) -> None:
        self._stop.set()
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self) -> GatewayServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def parse_listen(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"listen address must be host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)
