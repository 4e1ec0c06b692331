"""The uniform asynchronous action-provider protocol.

Every provider (transfer, compute, search, review) exposes the same five
operations: introspect, run, status, cancel, release. Callers submit a
request with a caller-chosen idempotency key, then poll status until the
action reaches a terminal state. BaseProvider owns the bookkeeping all
providers share: idempotent run(), the lifecycle state machine, frozen
terminal snapshots, record TTL, and per-action authorization.

Engines talk to providers through a transport: LocalTransport calls the
provider object in-process, HttpTransport speaks the wire routes
(GET /, POST /run, GET /status/{id}, POST /cancel/{id},
POST /release/{id}).
"""
from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable

from .auth import AuditLog, AuthContext, TokenStore
from .errors import Conflict, FabricError, NotFound, SchemaViolation, Unauthorized
from .model import canonical_json

ACTIVE = "ACTIVE"
INACTIVE = "INACTIVE"
SUCCEEDED = "SUCCEEDED"
FAILED = "FAILED"

TERMINAL = (SUCCEEDED, FAILED)
LEGAL_TRANSITIONS = {
    ACTIVE: {INACTIVE, SUCCEEDED, FAILED},
    INACTIVE: {ACTIVE, SUCCEEDED, FAILED},
    SUCCEEDED: set(),
    FAILED: set(),
}


class UnknownAction(NotFound):
    code = "UnknownAction"


class ActionStillActive(Conflict):
    code = "ActionStillActive"


class ProviderBusy(FabricError):
    code = "ProviderBusy"
    http_status = 503


class ProviderUnreachable(FabricError):
    code = "ProviderUnreachable"
    http_status = 502


class IllegalTransition(FabricError):
    code = "IllegalTransition"


def iso(ts: float | None) -> str | None:
    if ts is None:
        return None
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(ts)) + f".{int(ts * 1e6) % 1_000_000:06d}Z"


@dataclass
class ActionRecord:
    """Provider-side lifecycle record for one action."""
    action_id: str
    request_id: str
    body: dict[str, Any]
    owner: str
    monitor_by: tuple[str, ...]
    manage_by: tuple[str, ...]
    status: str = ACTIVE
    details: dict[str, Any] = field(default_factory=dict)
    runtime_s: float | None = None
    queue_wait_s: float | None = None
    created_at: float = field(default_factory=time.time)
    completed_at: float | None = None
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)
    cancel_event: threading.Event = field(default_factory=threading.Event, repr=False)
    _frozen_wire: str | None = None  # byte-stable snapshot once terminal

    def to_wire(self) -> dict[str, Any]:
        return {
            "action_id": self.action_id,
            "status": self.status,
            "details": self.details,
            "runtime_s": self.runtime_s,
            "queue_wait_s": self.queue_wait_s,
            "created_at": iso(self.created_at),
            "completed_at": iso(self.completed_at),
        }

    def wire_text(self) -> str:
        with self.lock:
            if self._frozen_wire is not None:
                return self._frozen_wire
            return canonical_json(self.to_wire())


@dataclass(frozen=True)
class ProviderDescriptor:
    title: str
    kind: str
    input_schema: dict[str, Any]
    scopes: tuple[str, ...]

    def to_wire(self) -> dict[str, Any]:
        return {"title": self.title, "kind": self.kind, "input_schema": self.input_schema,
                "scopes": list(self.scopes)}


class BaseProvider:
    """Common provider machinery; subclasses implement the action itself.

    Subclass contract:
      kind            -- "transfer" | "compute" | "search" | "review"
      descriptor()    -- static ProviderDescriptor
      validate_body() -- raise SchemaViolation on bad input
      required_scope(body) -- scope string the caller must hold
      start(record)   -- begin executing; may complete synchronously
      stop(record)    -- best-effort halt of side effects on cancel
    """

    kind = "stub"
    terminal_ttl_s = 24 * 3600.0

    def __init__(self, token_store: TokenStore):
        self.tokens = token_store
        self.audit = AuditLog()
        self._lock = threading.Lock()
        self._actions: dict[str, ActionRecord] = {}
        self._by_request: dict[str, str] = {}

    # -- subclass hooks --------------------------------------------------------

    def descriptor(self) -> ProviderDescriptor:
        raise NotImplementedError

    def validate_body(self, body: dict[str, Any]) -> None:
        raise NotImplementedError

    def required_scopes(self, body: dict[str, Any]) -> list[str]:
        return [f"{self.kind}:run"]

    def start(self, record: ActionRecord) -> None:
        raise NotImplementedError

    def stop(self, record: ActionRecord) -> None:
        pass

    def refresh(self, record: ActionRecord) -> None:
        """Reconcile a non-terminal record with backing state (agents)."""

    # -- protocol operations ---------------------------------------------------

    def introspect(self) -> dict[str, Any]:
        return self.descriptor().to_wire()

    def run(self, token: str | None, request_id: str, body: dict[str, Any],
            monitor_by: tuple[str, ...] = (), manage_by: tuple[str, ...] = ()) -> ActionRecord:
        if not request_id or not isinstance(request_id, str):
            raise SchemaViolation("request_id must be a non-empty string")
        self.validate_body(body if isinstance(body, dict) else {})
        ctx = self.tokens.check(token, None)
        for scope in self.required_scopes(body):
            if not ctx.allows(scope):
                raise Unauthorized(f"scope {scope} required", detail={"required": scope})
        self._purge_expired()
        with self._lock:
            existing_id = self._by_request.get(request_id)
            if existing_id is not None:
                record = self._actions.get(existing_id)
                if record is not None:
                    if canonical_json(record.body) != canonical_json(body):
                        raise Conflict(f"request_id {request_id} reused with a different body")
                    self.audit.record(ctx.principal.principal_id, "run-dedup", record.action_id)
                    return record
            record = ActionRecord(
                action_id=f"act-{uuid.uuid4().hex[:16]}",
                request_id=request_id,
                body=body,
                owner=ctx.principal.principal_id,
                monitor_by=tuple(monitor_by) or (ctx.principal.principal_id,),
                manage_by=tuple(manage_by) or (ctx.principal.principal_id,),
            )
            self._actions[record.action_id] = record
            self._by_request[request_id] = record.action_id
        self.audit.record(ctx.principal.principal_id, "run", record.action_id)
        try:
            self.start(record)
        except FabricError:
            with self._lock:
                self._actions.pop(record.action_id, None)
                self._by_request.pop(request_id, None)
            raise
        return record

    def status(self, token: str | None, action_id: str) -> ActionRecord:
        ctx = self.tokens.check(token, None)
        record = self._get(action_id)
        self._require(ctx, record, record.monitor_by, "monitor")
        self.refresh(record)
        self.audit.record(ctx.principal.principal_id, "status", action_id)
        return record

    def cancel(self, token: str | None, action_id: str) -> ActionRecord:
        ctx = self.tokens.check(token, None)
        record = self._get(action_id)
        self._require(ctx, record, record.manage_by, "manage")
        self.audit.record(ctx.principal.principal_id, "cancel", action_id)
        with record.lock:
            if record.status in TERMINAL:
                return record  # documented race contract: terminal wins
            record.cancel_event.set()
        self.stop(record)
        self.refresh(record)
        # stop() may have completed the record; otherwise fail it as canceled.
        with record.lock:
            if record.status not in TERMINAL:
                self._complete(record, FAILED, {"code": "Canceled", "message": "canceled by caller"})
        return record

    def release(self, token: str | None, action_id: str) -> dict[str, Any]:
        ctx = self.tokens.check(token, None)
        record = self._get(action_id)
        self._require(ctx, record, record.manage_by, "manage")
        with record.lock:
            if record.status not in TERMINAL:
                raise ActionStillActive(f"action {action_id} is {record.status}")
        with self._lock:
            self._actions.pop(action_id, None)
            self._by_request.pop(record.request_id, None)
        self.audit.record(ctx.principal.principal_id, "release", action_id)
        return {"released": action_id}

    # -- internals ------------------------------------------------------------

    def _get(self, action_id: str) -> ActionRecord:
        with self._lock:
            record = self._actions.get(action_id)
        if record is None:
            raise UnknownAction(f"no action {action_id}")
        return record

    def _require(self, ctx: AuthContext, record: ActionRecord,
                 allowed: tuple[str, ...], what: str) -> None:
        if ctx.principal.principal_id == record.owner:
            return
        if ctx.principal.principal_id in allowed:
            return
        if ctx.allows(f"{self.kind}:admin"):
            return
        raise Unauthorized(f"principal {ctx.principal.principal_id} may not {what} action {record.action_id}")

    def _transition(self, record: ActionRecord, new_status: str) -> None:
        with record.lock:
            if new_status not in LEGAL_TRANSITIONS.get(record.status, set()):
                raise IllegalTransition(f"{record.status} -> {new_status} on {record.action_id}")
            record.status = new_status

    def _complete(self, record: ActionRecord, status: str, details: dict[str, Any],
                  runtime_s: float | None = None, queue_wait_s: float | None = None) -> None:
        """Terminal transition; freezes the wire snapshot."""
        with record.lock:
            self._transition(record, status)
            record.details = details
            record.runtime_s = float(runtime_s if runtime_s is not None else 0.0)
            record.queue_wait_s = queue_wait_s
            record.completed_at = time.time()
            record._frozen_wire = canonical_json(record.to_wire())

    def _purge_expired(self) -> None:
        deadline = time.time() - self.terminal_ttl_s
        with self._lock:
            stale = [a for a in self._actions.values()
                     if a.status in TERMINAL and a.completed_at is not None and a.completed_at < deadline]
            for record in stale:
                self._actions.pop(record.action_id, None)
                self._by_request.pop(record.request_id, None)


# -- transports ----------------------------------------------------------------


class LocalTransport:
    """In-process transport: calls the provider object directly, still
    enforcing tokens and scopes. ``unreachable`` simulates an outage."""

    def __init__(self, provider: BaseProvider):
        self.provider = provider
        self.unreachable = False

    def _check_reachable(self) -> None:
        if self.unreachable:
            raise ProviderUnreachable("provider offline (simulated)")

    def introspect(self) -> dict[str, Any]:
        self._check_reachable()
        return self.provider.introspect()

    def run(self, token: str | None, request_id: str, body: dict[str, Any],
            monitor_by: tuple[str, ...] = (), manage_by: tuple[str, ...] = ()) -> dict[str, Any]:
        self._check_reachable()
        record = self.provider.run(token, request_id, body, monitor_by, manage_by)
        return _loads(record.wire_text())

    def status(self, token: str | None, action_id: str) -> dict[str, Any]:
        self._check_reachable()
        record = self.provider.status(token, action_id)
        return _loads(record.wire_text())

    def cancel(self, token: str | None, action_id: str) -> dict[str, Any]:
        self._check_reachable()
        return _loads(self.provider.cancel(token, action_id).wire_text())

    def release(self, token: str | None, action_id: str) -> dict[str, Any]:
        self._check_reachable()
        return self.provider.release(token, action_id)


def _loads(text: str) -> dict[str, Any]:
    import json

    return json.loads(text)


class HttpTransport:
    """Wire transport for provider routes under a base URL."""

    def __init__(self, base_url: str, timeout_s: float = 30.0):
        import requests

        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self._session = requests.Session()

    def _call(self, method: str, path: str, token: str | None = None,
              body: dict[str, Any] | None = None) -> dict[str, Any]:
        import requests

        headers = {}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = self._session.request(method, self.base_url + path, json=body,
                                         headers=headers, timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise ProviderUnreachable(f"{self.base_url}: {exc}") from None
        if resp.status_code >= 400:
            from .errors import error_from_body

            try:
                payload = resp.json()
            except ValueError:
                payload = {"error": {"code": "Internal", "message": resp.text[:200]}}
            raise error_from_body(resp.status_code, payload)
        return resp.json()

    def introspect(self) -> dict[str, Any]:
        return self._call("GET", "/")

    def run(self, token: str | None, request_id: str, body: dict[str, Any],
            monitor_by: tuple[str, ...] = (), manage_by: tuple[str, ...] = ()) -> dict[str, Any]:
        payload = {"request_id": request_id, "body": body,
                   "monitor_by": list(monitor_by), "manage_by": list(manage_by)}
        return self._call("POST", "/run", token, payload)

    def status(self, token: str | None, action_id: str) -> dict[str, Any]:
        return self._call("GET", f"/status/{action_id}", token)

    def cancel(self, token: str | None, action_id: str) -> dict[str, Any]:
        return self._call("POST", f"/cancel/{action_id}", token)

    def release(self, token: str | None, action_id: str) -> dict[str, Any]:
        return self._call("POST", f"/release/{action_id}", token)


TransportResolver = Callable[[str], Any]


class ProviderDirectory:
    """Maps provider URLs to transports. local://name entries are bound to
    in-process providers; http(s):// URLs get an HttpTransport each."""

    def __init__(self):
        self._local: dict[str, LocalTransport] = {}
        self._http: dict[str, HttpTransport] = {}
        self._lock = threading.Lock()

    def bind_local(self, name: str, provider: BaseProvider) -> str:
        url = f"local://{name}"
        self._local[url] = LocalTransport(provider)
        return url

    def resolve(self, provider_url: str):
        if provider_url.startswith("local://"):
            transport = self._local.get(provider_url)
            if transport is None:
                raise ProviderUnreachable(f"no local provider bound at {provider_url}")
            return transport
        with self._lock:
            transport = self._http.get(provider_url)
            if transport is None:
                transport = HttpTransport(provider_url)
                self._http[provider_url] = transport
            return transport
