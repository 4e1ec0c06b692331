"""Compute action provider and compute endpoint agents.

An agent executes registered functions with a FIFO queue and a worker
pool of its configured parallelism, journaling task lifecycle so a
restarted agent re-queues unfinished work and never re-executes finished
work. The provider maps the uniform action protocol onto agent task
submission and reports provider-measured runtime (execution only) plus
queue wait separately.
"""
from __future__ import annotations

import json
import queue
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .auth import TokenStore
from .errors import FabricError, NotFound, SchemaViolation, ValidationFailed
from .model import canonical_json, content_id
from .protocol import (ACTIVE, FAILED, SUCCEEDED, ActionRecord, BaseProvider,
                       ProviderDescriptor, ProviderUnreachable)
from .storage import NdjsonLog, read_ndjson
from .stubs import BUILTIN_STUBS, StubCanceled

DEFAULT_TIMEOUT_S = 600.0


class UnknownEndpoint(NotFound):
    code = "UnknownEndpoint"


class UnknownFunction(NotFound):
    code = "UnknownFunction"


class UnknownTask(NotFound):
    code = "UnknownTask"


class BadSpec(ValidationFailed):
    code = "BadSpec"


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    kind: str  # builtin-stub | external-process
    payload: dict[str, Any]

    @property
    def function_id(self) -> str:
        return content_id("fn", {"name": self.name, "kind": self.kind, "payload": self.payload})

    def to_doc(self) -> dict[str, Any]:
        return {"function_id": self.function_id, "name": self.name, "kind": self.kind, "payload": self.payload}


def function_from_doc(doc: dict[str, Any]) -> FunctionSpec:
    if not doc.get("name"):
        raise BadSpec("function spec needs a name")
    kind = doc.get("kind", "builtin-stub")
    if kind not in ("builtin-stub", "external-process"):
        raise BadSpec(f"unknown function kind {kind!r}")
    payload = doc.get("payload", {})
    if kind == "external-process":
        argv = payload.get("argv")
        if not isinstance(argv, list) or not argv or not all(isinstance(a, str) for a in argv):
            raise BadSpec("external-process payload needs a non-empty argv vector")
    return FunctionSpec(name=doc["name"], kind=kind, payload=payload)


@dataclass
class Task:
    task_id: str
    function: dict[str, Any]
    args: dict[str, Any]
    status: str = "QUEUED"  # QUEUED | RUNNING | SUCCEEDED | FAILED
    result: dict[str, Any] | None = None
    error: dict[str, Any] | None = None
    runtime_s: float | None = None
    queue_wait_s: float | None = None
    submitted_mono: float = field(default_factory=time.monotonic)
    cancel_event: threading.Event = field(default_factory=threading.Event, repr=False)

    def to_wire(self) -> dict[str, Any]:
        return {"task_id": self.task_id, "status": self.status, "result": self.result,
                "error": self.error, "runtime_s": self.runtime_s, "queue_wait_s": self.queue_wait_s}


class ComputeAgent:
    """Executes tasks with bounded parallelism; journal-backed restarts."""

    def __init__(self, data_dir: Path, max_parallel: int = 2, labels: tuple[str, ...] = (),
                 default_timeout_s: float = DEFAULT_TIMEOUT_S):
        if max_parallel < 1:
            raise ValidationFailed("max_parallel must be >= 1")
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.max_parallel = max_parallel
        self.labels = labels
        self.default_timeout_s = default_timeout_s
        self.builtins = dict(BUILTIN_STUBS)
        self._journal = NdjsonLog(self.data_dir / "tasks.ndjson")
        self._tasks: dict[str, Task] = {}
        self._lock = threading.Lock()
        self._queue: queue.Queue[str] = queue.Queue()
        self._running = True
        self._active_count = 0
        self.peak_active = 0  # probe for the parallelism invariant
        self._workers = [threading.Thread(target=self._worker, name=f"compute-worker-{i}", daemon=True)
                         for i in range(max_parallel)]
        self._recover()
        for w in self._workers:
            w.start()

    # -- public ops ------------------------------------------------------------

    def submit(self, task_id: str, function: dict[str, Any], args: dict[str, Any]) -> dict[str, Any]:
        with self._lock:
            existing = self._tasks.get(task_id)
            if existing is not None:
                return existing.to_wire()
            task = Task(task_id=task_id, function=function, args=args or {})
            self._tasks[task_id] = task
        self._journal.append({"event": "submitted", "task_id": task_id, "function": function, "args": args or {}})
        self._queue.put(task_id)
        return task.to_wire()

    def get(self, task_id: str) -> dict[str, Any]:
        with self._lock:
            task = self._tasks.get(task_id)
        if task is None:
            raise UnknownTask(f"no task {task_id}")
        return task.to_wire()

    def cancel(self, task_id: str) -> dict[str, Any]:
        with self._lock:
            task = self._tasks.get(task_id)
        if task is None:
            raise UnknownTask(f"no task {task_id}")
        task.cancel_event.set()
        with self._lock:
            if task.status == "QUEUED":
                self._finish(task, "FAILED", error={"code": "Canceled", "message": "canceled while queued"})
        return task.to_wire()

    def stop(self) -> None:
        self._running = False
        for _ in self._workers:
            self._queue.put("")  # wake
        self._journal.close()

    # -- recovery ---------------------------------------------------------------

    def _recover(self) -> None:
        submitted: dict[str, dict] = {}
        done: dict[str, dict] = {}
        for rec in read_ndjson(self.data_dir / "tasks.ndjson"):
            if rec.get("event") == "submitted":
                submitted[rec["task_id"]] = rec
            elif rec.get("event") == "done":
                done[rec["task_id"]] = rec
        for task_id, rec in submitted.items():
            task = Task(task_id=task_id, function=rec["function"], args=rec["args"])
            fin = done.get(task_id)
            if fin is not None:
                task.status = fin["status"]
                task.result = fin.get("result")
                task.error = fin.get("error")
                task.runtime_s = fin.get("runtime_s")
                task.queue_wait_s = fin.get("queue_wait_s")
            self._tasks[task_id] = task
            if fin is None:
                self._queue.put(task_id)  # unfinished: run again (result not yet delivered)

    # -- execution ---------------------------------------------------------------

    def _worker(self) -> None:
        while self._running:
            task_id = self._queue.get()
            if not task_id or not self._running:
                continue
            with self._lock:
                task = self._tasks.get(task_id)
                if task is None or task.status != "QUEUED":
                    continue
                task.status = "RUNNING"
                task.queue_wait_s = max(0.0, time.monotonic() - task.submitted_mono)
                self._active_count += 1
                self.peak_active = max(self.peak_active, self._active_count)
            started = time.monotonic()
            try:
                result = self._execute(task)
                status, result_doc, error = "SUCCEEDED", result, None
            except StubCanceled:
                status, result_doc, error = "FAILED", None, {"code": "Canceled", "message": "canceled"}
            except FabricError as exc:
                status, result_doc, error = "FAILED", None, {"code": exc.code, "message": exc.message, **exc.detail}
            except Exception as exc:  # stub bug: report, don't kill the worker
                status, result_doc, error = "FAILED", None, {"code": "Internal", "message": repr(exc)}
            runtime = time.monotonic() - started
            with self._lock:
                self._active_count -= 1
                if task.status == "RUNNING":
                    self._finish(task, status, result=result_doc, error=error, runtime_s=runtime)

    def _finish(self, task: Task, status: str, result=None, error=None, runtime_s: float | None = None) -> None:
        task.status = status
        task.result = result
        task.error = error
        task.runtime_s = runtime_s if runtime_s is not None else 0.0
        if task.queue_wait_s is None:
            task.queue_wait_s = max(0.0, time.monotonic() - task.submitted_mono)
        self._journal.append({"event": "done", "task_id": task.task_id, "status": status,
                              "result": result, "error": error, "runtime_s": task.runtime_s,
                              "queue_wait_s": task.queue_wait_s})

    def _execute(self, task: Task) -> dict[str, Any]:
        fn = task.function
        kind = fn.get("kind", "builtin-stub")
        payload = fn.get("payload", {})
        timeout_s = float(payload.get("timeout_s", self.default_timeout_s))
        if kind == "builtin-stub":
            stub_name = payload.get("stub", "sleep")
            stub = self.builtins.get(stub_name)
            if stub is None:
                raise SchemaViolation(f"unknown builtin stub {stub_name!r}")
            done: dict[str, Any] = {}
            exc_holder: list[BaseException] = []

            def call():
                try:
                    done["result"] = stub(payload, task.args, task.cancel_event)
                except BaseException as exc:
                    exc_holder.append(exc)

            runner = threading.Thread(target=call, daemon=True)
            runner.start()
            runner.join(timeout_s)
            if runner.is_alive():
                task.cancel_event.set()
                raise _timeout_error(timeout_s)
            if exc_holder:
                raise exc_holder[0]
            return done.get("result") or {}
        if kind == "external-process":
            argv = [self._substitute(a, task.args) for a in payload["argv"]]
            try:
                proc = subprocess.Popen(argv, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
            except OSError as exc:
                raise FabricError(f"spawn failed: {exc}") from None
            try:
                stdout, stderr = proc.communicate(timeout=timeout_s)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.communicate()
                raise _timeout_error(timeout_s) from None
            if proc.returncode != 0:
                exc = FabricError(f"exit code {proc.returncode}", detail={"stderr": stderr[-2000:]})
                exc.code = "NonzeroExit"
                raise exc
            try:
                return json.loads(stdout)
            except json.JSONDecodeError:
                exc = FabricError("stdout is not a JSON document", detail={"stdout": stdout[:500]})
                exc.code = "UnparseableResult"
                raise exc from None
        raise SchemaViolation(f"unknown function kind {kind!r}")

    @staticmethod
    def _substitute(template: str, args: dict[str, Any]) -> str:
        """Fill {key} placeholders from args; values stringified, never shell-parsed."""
        out = template
        for key, value in args.items():
            out = out.replace("{" + key + "}", value if isinstance(value, str) else canonical_json(value))
        return out


def _timeout_error(timeout_s: float) -> FabricError:
    exc = FabricError(f"task exceeded {timeout_s:.0f}s timeout")
    exc.code = "Timeout"
    return exc


class ComputeAgentClient:
    """HTTP client for a remote agent (POST /tasks, GET /tasks/{id}, cancel)."""

    def __init__(self, base_url: str, token: str | None = None, timeout_s: float = 30.0):
        import requests

        self.base_url = base_url.rstrip("/")
        self.token = token
        self.timeout_s = timeout_s
        self._session = requests.Session()

    def _call(self, method: str, path: str, body: dict | None = None) -> dict[str, Any]:
        import requests

        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        try:
            resp = self._session.request(method, self.base_url + path, json=body, headers=headers,
                                         timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise ProviderUnreachable(f"{self.base_url}: {exc}") from None
        if resp.status_code >= 400:
            from .errors import error_from_body

            raise error_from_body(resp.status_code, resp.json() if resp.content else {})
        return resp.json()

    def submit(self, task_id: str, function: dict, args: dict) -> dict[str, Any]:
        return self._call("POST", "/tasks", {"task_id": task_id, "function": function, "args": args})

    def get(self, task_id: str) -> dict[str, Any]:
        return self._call("GET", f"/tasks/{task_id}")

    def cancel(self, task_id: str) -> dict[str, Any]:
        return self._call("POST", f"/tasks/{task_id}/cancel")


@dataclass
class ComputeEndpoint:
    endpoint_id: str
    agent: Any  # ComputeAgent or ComputeAgentClient
    agent_url: str
    max_parallel: int
    labels: tuple[str, ...] = ()


class ComputeProvider(BaseProvider):
    kind = "compute"

    def __init__(self, token_store: TokenStore):
        super().__init__(token_store)
        self._endpoints: dict[str, ComputeEndpoint] = {}
        self._functions: dict[str, FunctionSpec] = {}
        self._reg_lock = threading.Lock()

    # -- registry ---------------------------------------------------------------

    def register_endpoint(self, agent, agent_url: str, max_parallel: int,
                          labels: tuple[str, ...] = (), endpoint_id: str | None = None) -> str:
        endpoint_id = endpoint_id or f"ep-{uuid.uuid4().hex[:12]}"
        with self._reg_lock:
            if endpoint_id in self._endpoints:
                raise ValidationFailed(f"endpoint {endpoint_id} already registered")
            self._endpoints[endpoint_id] = ComputeEndpoint(endpoint_id, agent, agent_url, max_parallel, labels)
        return endpoint_id

    def register_function(self, spec_doc: dict[str, Any]) -> str:
        spec = function_from_doc(spec_doc)
        with self._reg_lock:
            self._functions[spec.function_id] = spec
        return spec.function_id

    def get_function(self, function_id: str) -> FunctionSpec:
        spec = self._functions.get(function_id)
        if spec is None:
            raise UnknownFunction(f"no function {function_id}")
        return spec

    def list_endpoints(self) -> list[dict[str, Any]]:
        return [{"endpoint_id": e.endpoint_id, "agent_url": e.agent_url,
                 "max_parallel": e.max_parallel, "labels": list(e.labels)}
                for e in self._endpoints.values()]

    def list_functions(self) -> list[dict[str, Any]]:
        return [spec.to_doc() for spec in self._functions.values()]

    # -- protocol hooks -----------------------------------------------------------

    def descriptor(self) -> ProviderDescriptor:
        return ProviderDescriptor(
            title="Compute action provider",
            kind="compute",
            input_schema={
                "required": ["endpoint_id", "function_id"],
                "properties": {
                    "endpoint_id": {"type": "string"},
                    "function_id": {"type": "string"},
                    "args": {"type": "object"},
                },
            },
            scopes=("compute:<endpoint_id>",),
        )

    def validate_body(self, body: dict[str, Any]) -> None:
        for key in ("endpoint_id", "function_id"):
            if not isinstance(body.get(key), str) or not body[key]:
                raise SchemaViolation(f"compute request needs string {key}")
        if "args" in body and not isinstance(body["args"], dict):
            raise SchemaViolation("args must be an object")

    def required_scopes(self, body: dict[str, Any]) -> list[str]:
        return [f"compute:{body['endpoint_id']}"]

    def start(self, record: ActionRecord) -> None:
        endpoint = self._endpoints.get(record.body["endpoint_id"])
        if endpoint is None:
            raise UnknownEndpoint(f"no endpoint {record.body['endpoint_id']}")
        spec = self.get_function(record.body["function_id"])
        endpoint.agent.submit(record.action_id, spec.to_doc(), record.body.get("args", {}))

    def refresh(self, record: ActionRecord) -> None:
        if record.status not in (ACTIVE,):
            return
        endpoint = self._endpoints.get(record.body["endpoint_id"])
        if endpoint is None:
            return
        try:
            task = endpoint.agent.get(record.action_id)
        except UnknownTask:
            return
        except ProviderUnreachable:
            return  # agent offline: stay ACTIVE, poller will try again
        if task["status"] == "SUCCEEDED":
            with record.lock:
                if record.status == ACTIVE:
                    self._complete(record, SUCCEEDED, task.get("result") or {},
                                   runtime_s=task.get("runtime_s"), queue_wait_s=task.get("queue_wait_s"))
        elif task["status"] == "FAILED":
            with record.lock:
                if record.status == ACTIVE:
                    self._complete(record, FAILED, task.get("error") or {"code": "Failed"},
                                   runtime_s=task.get("runtime_s"), queue_wait_s=task.get("queue_wait_s"))

    def stop(self, record: ActionRecord) -> None:
        endpoint = self._endpoints.get(record.body["endpoint_id"])
        if endpoint is None:
            return
        try:
            endpoint.agent.cancel(record.action_id)
        except (UnknownTask, ProviderUnreachable):
            pass
