"""Strangler-fig edge gateway: routing, filters, and the HTTP server."""

from stranglerkit.gateway.routing import Decision, RouteTable, bucket, route, set_shift, stable_hash64

__all__ = ["Decision", "RouteTable", "bucket", "route", "set_shift", "stable_hash64"]
