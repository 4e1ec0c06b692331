"""Minimal threaded HTTP layer shared by every service.

Routes are (method, path-regex, scope, handler) tuples; scope is
PUBLIC (no auth), AUTH (any valid token; the core op enforces
specifics), or a literal scope string enforced here. Handlers receive a
Request and return a dict (JSON 200), a (status, dict) pair, or a
Response for raw bytes. FabricError maps to its http_status with a
structured error body.
"""
from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable
from urllib.parse import parse_qs, urlparse

from .auth import AuthContext, TokenStore
from .errors import FabricError, NotFound, Unauthorized

log = logging.getLogger("flowfabric.http")

PUBLIC = None
AUTH = "auth"

CORS_HEADERS = {
    "Access-Control-Allow-Origin": "*",
    "Access-Control-Allow-Methods": "GET, POST, PUT, DELETE, OPTIONS",
    "Access-Control-Allow-Headers": "Authorization, Content-Type, X-Chunk-Sha256",
}


@dataclass
class Request:
    method: str
    path: str
    query: dict[str, str]
    headers: dict[str, str]
    body: bytes
    params: dict[str, str] = field(default_factory=dict)
    ctx: AuthContext | None = None
    token: str | None = None

    def json(self) -> Any:
        if not self.body:
            return {}
        try:
            return json.loads(self.body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FabricError(f"request body is not valid JSON: {exc}") from None


@dataclass
class Response:
    status: int = 200
    body: bytes = b""
    headers: dict[str, str] = field(default_factory=dict)
    content_type: str = "application/octet-stream"


@dataclass(frozen=True)
class Route:
    method: str
    pattern: str
    scope: str | None  # PUBLIC, AUTH, or a scope string
    handler: Callable[[Request], Any]
    name: str = ""

    @property
    def regex(self) -> re.Pattern:
        return re.compile("^" + self.pattern + "$")


class JsonApp:
    """A routed JSON application bound to a token store."""

    def __init__(self, name: str, tokens: TokenStore | None):
        self.name = name
        self.tokens = tokens
        self.routes: list[Route] = []

    def route(self, method: str, pattern: str, scope: str | None, name: str = ""):
        def deco(fn):
            self.routes.append(Route(method, pattern, scope, fn, name or fn.__name__))
            return fn

        return deco

    def add(self, method: str, pattern: str, scope: str | None, fn, name: str = "") -> None:
        self.routes.append(Route(method, pattern, scope, fn, name or fn.__name__))

    def handle(self, req: Request) -> Response:
        if req.method == "OPTIONS":
            return Response(204, b"", headers=dict(CORS_HEADERS))
        for route in self.routes:
            if route.method != req.method:
                continue
            m = route.regex.match(req.path)
            if m is None:
                continue
            req.params = m.groupdict()
            try:
                if route.scope is not PUBLIC:
                    if self.tokens is None:
                        raise Unauthorized("service has no token store")
                    required = None if route.scope == AUTH else route.scope
                    req.ctx = self.tokens.check(req.token, required)
                result = route.handler(req)
            except FabricError as exc:
                return _json_response(exc.http_status, exc.to_body())
            except Exception:  # pragma: no cover - defensive
                log.exception("unhandled error in %s %s", req.method, req.path)
                return _json_response(500, {"error": {"code": "Internal", "message": "internal error", "detail": {}}})
            if isinstance(result, Response):
                return result
            if isinstance(result, tuple):
                return _json_response(result[0], result[1])
            return _json_response(200, result if result is not None else {})
        exc = NotFound(f"no route {req.method} {req.path}")
        return _json_response(exc.http_status, exc.to_body())


def _json_response(status: int, body: Any) -> Response:
    data = json.dumps(body).encode("utf-8")
    return Response(status=status, body=data, content_type="application/json")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    app: JsonApp = None  # set per server subclass

    def log_message(self, fmt, *args):  # stdlib default spams stderr
        log.debug("%s %s", self.address_string(), fmt % args)

    def _dispatch(self, method: str) -> None:
        parsed = urlparse(self.path)
        query = {k: v[0] for k, v in parse_qs(parsed.query).items()}
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        token = None
        authz = self.headers.get("Authorization", "")
        if authz.startswith("Bearer "):
            token = authz[len("Bearer "):]
        req = Request(method=method, path=parsed.path, query=query,
                      headers=dict(self.headers.items()), body=body, token=token)
        resp = self.server.app.handle(req)
        try:
            self.send_response(resp.status)
            self.send_header("Content-Type", resp.content_type)
            self.send_header("Content-Length", str(len(resp.body)))
            for k, v in CORS_HEADERS.items():
                if k not in resp.headers:
                    self.send_header(k, v)
            for k, v in resp.headers.items():
                self.send_header(k, v)
            self.end_headers()
            self.wfile.write(resp.body)
        except (BrokenPipeError, ConnectionResetError):  # client went away
            pass

    def do_GET(self):
        self._dispatch("GET")

    def do_OPTIONS(self):
        self._dispatch("OPTIONS")

    def do_POST(self):
        self._dispatch("POST")

    def do_PUT(self):
        self._dispatch("PUT")

    def do_DELETE(self):
        self._dispatch("DELETE")


class AppServer:
    """Hosts a JsonApp on 127.0.0.1; ephemeral port by default."""

    def __init__(self, app: JsonApp, host: str = "127.0.0.1", port: int = 0):
        self.app = app
        self._httpd = ThreadingHTTPServer((host, port), _Handler)
        self._httpd.app = app
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def start(self) -> "AppServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        name=f"http-{self.app.name}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)
