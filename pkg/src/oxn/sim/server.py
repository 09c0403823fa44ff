"""HTTP front for a simulated SUE.

Serves the application routes of the entry service plus Prometheus-style
``/api/v1/query_range`` and Jaeger-style ``/api/traces`` from the same port,
so the HTTP collectors and load transport can be exercised without Docker.
"""

from __future__ import annotations

import json
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from types import SimpleNamespace
from urllib.parse import parse_qs, urlparse

from oxn.sim.engine import UnsupportedExpr, find_traces, handle_request, query_range


class _Handler(BaseHTTPRequestHandler):
    server: "SimHttpServer"

    def log_message(self, fmt, *args):  # keep test output quiet
        pass

    def _send(self, status: int, body: dict | str, content_type: str = "application/json") -> None:
        data = (json.dumps(body) if isinstance(body, dict) else body).encode()
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _app(self, verb: str) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        if length:
            self.rfile.read(length)
        path = urlparse(self.path).path
        resp = self.server.serve(SimpleNamespace(verb=verb, endpoint=path))
        self._send(resp.status, {"status": resp.status, "latency_ms": resp.latency_ms})

    def do_GET(self):
        url = urlparse(self.path)
        q = {k: v[-1] for k, v in parse_qs(url.query).items()}
        state = self.server.state
        if url.path == "/api/v1/query_range":
            try:
                body = query_range(state, q["query"], float(q["start"]), float(q["end"]), float(q["step"]))
            except KeyError as exc:
                return self._send(400, {"status": "error", "errorType": "bad_data", "error": f"missing {exc}"})
            except (UnsupportedExpr, ValueError) as exc:
                return self._send(400, {"status": "error", "errorType": "bad_data", "error": str(exc)})
            return self._send(200, body)
        if url.path == "/api/traces":
            try:
                body = find_traces(state, q["service"], int(q["start"]), int(q["end"]),
                                   operation=q.get("operation"), limit=int(q["limit"]) if "limit" in q else None)
            except (KeyError, ValueError) as exc:
                return self._send(400, {"data": None, "errors": [{"code": 400, "msg": str(exc)}]})
            return self._send(200, body)
        return self._app("get")

    def do_POST(self):
        self._app("post")

    def do_PUT(self):
        self._app("put")

    def do_DELETE(self):
        self._app("delete")


class SimHttpServer(ThreadingHTTPServer):
    """Serve ``runtime``'s simulation; requests are timestamped by its clock."""

    daemon_threads = True

    def __init__(self, runtime, host: str = "127.0.0.1", port: int = 0, seed: int = 0,
                 timeout_ms: float = 1000.0):
        super().__init__((host, port), _Handler)
        self.runtime = runtime
        self.timeout_ms = timeout_ms
        self._rng = random.Random(seed)
        self._seq = 0
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None

    @property
    def state(self):
        return self.runtime.sim

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def serve(self, task):
        with self._lock:
            seq = self._seq
            self._seq += 1
            state = self.state
            return handle_request(state.topology, state, task, self._rng, self.runtime.clock.now(),
                                  user=0, seq=seq, timeout_ms=self.timeout_ms)

    def start(self) -> "SimHttpServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True, name="sim-http")
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
