"""Minimal upstream service for gateway integration tests.

Usage: python stub_upstream.py NAME. Prints the bound port on stdout, then
answers every request with a JSON body naming itself, the path and the
routing key. ``GET /__stats`` returns how many requests it has answered.
"""

from __future__ import annotations

import json
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


def serve(name: str) -> None:
    lock = threading.Lock()
    served = {"count": 0, "keys": []}

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        disable_nagle_algorithm = True

        def log_message(self, fmt, *args):
            pass

        def _send(self, doc):
            body = json.dumps(doc, sort_keys=True).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            length = int(self.headers.get("Content-Length") or 0)
            if length:
                self.rfile.read(length)
            if self.path == "/__stats":
                with lock:
                    return self._send(dict(served))
            key = self.headers.get("X-Routing-Key", "")
            with lock:
                served["count"] += 1
                served["keys"].append(key)
            self._send({"upstream": name, "path": self.path, "key": key})

        do_POST = do_PUT = do_DELETE = do_GET

    httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    httpd.daemon_threads = True
    print(httpd.server_address[1], flush=True)
    httpd.serve_forever()


if __name__ == "__main__":
    serve(sys.argv[1])
