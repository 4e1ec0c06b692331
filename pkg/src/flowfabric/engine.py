"""The flows service: deploys flow definitions and drives runs.

Each run is advanced by exactly one logical worker at a time; the
service multiplexes many runs over a small worker pool fed by a time
heap. A step submits its action with a deterministic idempotency key,
then polls the provider at exponentially growing intervals (1 s
doubling to a 10 min cap by default, no jitter). Every state change is
appended to a per-run fsynced event log before it is acted on or
acknowledged, and a restarted service reconstructs cursor and state
solely by replaying those logs; resubmission after a crash reuses the
same idempotency key so no step executes twice.
"""
from __future__ import annotations

import base64
import hashlib
import heapq
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .auth import AuthContext, TokenStore
from .errors import FabricError, NotFound, Unauthorized, ValidationFailed
from .model import (FlowDefinition, ActionState, ChoiceState, check_input, flow_from_doc,
                    next_state, resolve_parameters, set_path, validate_flow, END)
from .protocol import (ACTIVE, FAILED, INACTIVE, SUCCEEDED, ProviderBusy,
                       ProviderDirectory, ProviderUnreachable, iso)
from .storage import NdjsonLog, atomic_write_json, read_json, read_ndjson

# Run statuses (runs, not actions)
RUN_ACTIVE = "ACTIVE"
RUN_SUCCEEDED = "SUCCEEDED"
RUN_FAILED = "FAILED"
RUN_CANCELED = "CANCELED"
RUN_TERMINAL = (RUN_SUCCEEDED, RUN_FAILED, RUN_CANCELED)

# Event kinds
STEP_STARTED = "StepStarted"
ACTION_SUBMITTED = "ActionSubmitted"
ACTION_POLLED = "ActionPolled"
STEP_COMPLETED = "StepCompleted"
STEP_FAILED = "StepFailed"
RUN_COMPLETED = "RunCompleted"
RUN_FAILED_EV = "RunFailed"
RUN_CANCELED_EV = "RunCanceled"

KIND_TOTALS = {"transfer": "transfer_s", "compute": "compute_s", "search": "search_s", "review": "review_s"}


class UnknownFlow(NotFound):
    code = "UnknownFlow"


class UnknownRun(NotFound):
    code = "UnknownRun"


class EngineKilled(RuntimeError):
    """Raised by fault injection to halt the instance at a crash point."""


@dataclass(frozen=True)
class BackoffPolicy:
    initial: float = 1.0
    factor: float = 2.0
    cap: float = 600.0

    def __post_init__(self):
        if self.initial <= 0 or self.factor < 1 or self.cap < self.initial:
            raise ValidationFailed("backoff policy requires initial > 0, factor >= 1, cap >= initial")

    def next_poll_interval(self, k: int) -> float:
        if k < 0:
            raise ValidationFailed("poll count must be >= 0")
        return min(self.initial * (self.factor ** k), self.cap)

    def detection_lag(self, duration: float) -> float:
        """Analytic lag between action completion and the poll observing it."""
        t, k = 0.0, 0
        while True:
            t += self.next_poll_interval(k)
            if t >= duration:
                return t - duration
            k += 1


@dataclass(frozen=True)
class RetryPolicy:
    delays: tuple[float, ...] = (1.0, 4.0, 16.0)

    @property
    def max_attempts(self) -> int:
        return len(self.delays) + 1


def idem_key(run_id: str, step: str, attempt: int) -> str:
    return hashlib.sha256(f"{run_id}|{step}|{attempt}".encode()).hexdigest()[:32]


class FlowStore:
    def __init__(self, data_dir: Path):
        self.dir = Path(data_dir) / "flows"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def deploy(self, flow: FlowDefinition, owner: str) -> str:
        flow_id = flow.flow_id
        with self._lock:
            path = self.dir / f"{flow_id}.json"
            if not path.exists():
                atomic_write_json(path, {"flow_id": flow_id, "owner": owner,
                                         "deployed_at": time.time(), "definition": flow.to_doc()})
        return flow_id

    def get(self, flow_id: str) -> tuple[FlowDefinition, dict[str, Any]]:
        doc = read_json(self.dir / f"{flow_id}.json")
        if doc is None:
            raise UnknownFlow(f"no flow {flow_id}")
        return flow_from_doc(doc["definition"]), doc

    def list(self) -> list[dict[str, Any]]:
        out = []
        for path in sorted(self.dir.glob("flow-*.json")):
            doc = read_json(path)
            if doc:
                out.append({"flow_id": doc["flow_id"], "owner": doc["owner"],
                            "title": doc["definition"].get("title", ""),
                            "deployed_at": doc["deployed_at"]})
        return out


class RunStore:
    """Headers + append-only event logs; state reconstructed by replay."""

    def __init__(self, data_dir: Path):
        self.dir = Path(data_dir) / "runs"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._logs: dict[str, NdjsonLog] = {}
        self._lock = threading.Lock()
        self._run_keys: dict[str, str] = {}
        self._keys_log = NdjsonLog(self.dir / "run_keys.ndjson")
        for rec in read_ndjson(self.dir / "run_keys.ndjson"):
            self._run_keys[rec["run_key"]] = rec["run_id"]

    def run_for_key(self, run_key: str) -> str | None:
        with self._lock:
            return self._run_keys.get(run_key)

    def create(self, run_id: str, flow_id: str, input_doc: dict, owner: str,
               token_secret: str, run_key: str | None) -> dict[str, Any]:
        header = {"run_id": run_id, "flow_id": flow_id, "input": input_doc, "owner": owner,
                  "started_at": time.time(), "run_key": run_key, "delegation": token_secret}
        atomic_write_json(self.dir / f"{run_id}.json", header)
        if run_key:
            with self._lock:
                self._run_keys[run_key] = run_id
            self._keys_log.append({"run_key": run_key, "run_id": run_id})
        return header

    def header(self, run_id: str) -> dict[str, Any]:
        doc = read_json(self.dir / f"{run_id}.json")
        if doc is None:
            raise UnknownRun(f"no run {run_id}")
        return doc

    def events(self, run_id: str) -> list[dict[str, Any]]:
        return read_ndjson(self.dir / f"{run_id}.events")

    def append(self, run_id: str, record: dict[str, Any]) -> None:
        with self._lock:
            log = self._logs.get(run_id)
            if log is None:
                log = NdjsonLog(self.dir / f"{run_id}.events")
                self._logs[run_id] = log
        log.append(record)

    def close_log(self, run_id: str) -> None:
        with self._lock:
            log = self._logs.pop(run_id, None)
        if log:
            log.close()

    def list_ids(self) -> list[str]:
        return [p.stem for p in self.dir.glob("run-*.json")]

    def close(self) -> None:
        with self._lock:
            for log in self._logs.values():
                log.close()
            self._logs.clear()
            self._keys_log.close()


@dataclass
class _Inflight:
    request_id: str
    action_id: str | None
    attempt: int
    polls: int = 0
    submitted_mono: float | None = None
    submitted_wall: float | None = None


@dataclass
class _Driver:
    run_id: str
    flow: FlowDefinition
    header: dict[str, Any]
    seq: int = 0
    status: str = RUN_ACTIVE
    cursor: str | None = None
    step_started: bool = False
    attempt: int = 0
    transport_failures: int = 0
    inflight: _Inflight | None = None
    state_doc: dict[str, Any] = field(default_factory=dict)
    totals: dict[str, float] = field(default_factory=lambda: {v: 0.0 for v in KIND_TOTALS.values()})
    step_start_mono: float | None = None
    step_start_wall: float | None = None
    run_start_mono: float | None = None
    ended_at: float | None = None
    cancel_requested: bool = False
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def elapsed_s(self) -> float:
        if self.run_start_mono is not None:
            return time.monotonic() - self.run_start_mono
        return time.time() - self.header["started_at"]

    def step_wall_s(self) -> float:
        if self.step_start_mono is not None:
            return time.monotonic() - self.step_start_mono
        if self.step_start_wall is not None:
            return max(0.0, time.time() - self.step_start_wall)
        return 0.0


def replay(flow: FlowDefinition, header: dict[str, Any], events: list[dict[str, Any]]) -> _Driver:
    """Reconstruct driver state purely from the event log."""
    d = _Driver(run_id=header["run_id"], flow=flow, header=header, cursor=flow.start_at)
    for ev in events:
        kind = ev["kind"]
        d.seq = ev["seq"]
        if kind == STEP_STARTED:
            d.cursor = ev["step"]
            d.step_started = True
            d.inflight = None
            d.attempt = 0
            d.step_start_mono = None
            d.step_start_wall = ev.get("wall")
        elif kind == ACTION_SUBMITTED:
            detail = ev["detail"]
            d.attempt = detail.get("attempt", 0)
            d.inflight = _Inflight(request_id=detail["request_id"], action_id=detail.get("action_id"),
                                   attempt=d.attempt, submitted_wall=ev.get("wall"))
        elif kind == ACTION_POLLED:
            detail = ev["detail"]
            if detail.get("retry_attempt") is not None:
                d.inflight = None
                d.attempt = detail["retry_attempt"]
            elif d.inflight is not None:
                d.inflight.polls += 1
        elif kind == STEP_COMPLETED:
            detail = ev["detail"]
            if detail.get("result_path"):
                set_path(d.state_doc, detail["result_path"], detail.get("result"))
            total_key = KIND_TOTALS.get(detail.get("action_kind", ""))
            if total_key:
                d.totals[total_key] += float(detail.get("runtime_s") or 0.0)
            d.inflight = None
            d.step_started = False
            d.attempt = 0
            d.cursor = detail.get("next") if detail.get("next") is not None else END
        elif kind == STEP_FAILED:
            detail = ev["detail"]
            d.inflight = None
            d.step_started = False
            d.attempt = 0
            d.cursor = detail.get("next") if detail.get("next") is not None else END
        elif kind == RUN_COMPLETED:
            d.status = RUN_SUCCEEDED
            d.ended_at = ev.get("wall")
        elif kind == RUN_FAILED_EV:
            d.status = RUN_FAILED
            d.ended_at = ev.get("wall")
        elif kind == RUN_CANCELED_EV:
            d.status = RUN_CANCELED
            d.ended_at = ev.get("wall")
    return d


class Engine:
    """Drives runs against providers; all public methods are thread-safe."""

    def __init__(self, data_dir: Path, providers: ProviderDirectory, tokens: TokenStore,
                 backoff: BackoffPolicy | None = None, retry: RetryPolicy | None = None,
                 workers: int = 8, fault=None):
        self.flows = FlowStore(data_dir)
        self.runs = RunStore(data_dir)
        self.providers = providers
        self.tokens = tokens
        self.backoff = backoff or BackoffPolicy()
        self.retry = retry or RetryPolicy()
        self._fault_hook = fault
        self._workers_n = workers

        self._drivers: dict[str, _Driver] = {}
        self._summaries: dict[str, dict[str, Any]] = {}
        self._heap: list[tuple[float, int, str]] = []
        self._due: dict[str, int] = {}
        self._tick = 0
        self._cv = threading.Condition()
        self._threads: list[threading.Thread] = []
        self._running = False
        self._killed = False
        self._state_lock = threading.RLock()

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> "Engine":
        self._running = True
        self._killed = False
        for i in range(self._workers_n):
            t = threading.Thread(target=self._work_loop, name=f"engine-worker-{i}", daemon=True)
            t.start()
            self._threads.append(t)
        self._resume()
        return self

    def stop(self) -> None:
        self._running = False
        with self._cv:
            self._cv.notify_all()
        for t in self._threads:
            t.join(timeout=5)
        self._threads.clear()
        self.runs.close()

    def kill(self) -> None:
        """Abrupt halt: no further persistence or provider calls; in-memory
        state is abandoned, as in a crash."""
        self._killed = True
        self._running = False
        with self._cv:
            self._cv.notify_all()
        for t in self._threads:
            t.join(timeout=5)
        self._threads.clear()

    def _resume(self) -> None:
        for run_id in self.runs.list_ids():
            try:
                driver = self._load_driver(run_id)
            except FabricError:
                continue
            self._summaries[run_id] = self._summary_from_driver(driver)
            if driver.status == RUN_ACTIVE:
                with self._state_lock:
                    self._drivers[run_id] = driver
                self._schedule(run_id, 0.0)

    # -- fault injection -----------------------------------------------------------

    def _fault(self, label: str) -> None:
        if self._killed:
            raise EngineKilled(label)
        if self._fault_hook is not None:
            self._fault_hook(label)

    # -- public API ------------------------------------------------------------------

    def deploy_flow(self, ctx: AuthContext, definition: dict[str, Any]) -> dict[str, Any]:
        if not ctx.allows("flows:deploy"):
            raise Unauthorized("scope flows:deploy required")
        flow = validate_flow(flow_from_doc(definition))
        flow_id = self.flows.deploy(flow, ctx.principal.principal_id)
        return {"flow_id": flow_id, "title": flow.title}

    def list_flows(self, ctx: AuthContext) -> list[dict[str, Any]]:
        if not ctx.allows("flows:read"):
            raise Unauthorized("scope flows:read required")
        return self.flows.list()

    def get_flow(self, ctx: AuthContext, flow_id: str) -> dict[str, Any]:
        if not ctx.allows("flows:read"):
            raise Unauthorized("scope flows:read required")
        _flow, doc = self.flows.get(flow_id)
        return doc

    def start_run(self, ctx: AuthContext, flow_id: str, input_doc: dict[str, Any],
                  run_key: str | None = None) -> dict[str, Any]:
        if not ctx.allows("flows:run"):
            raise Unauthorized("scope flows:run required")
        flow, _doc = self.flows.get(flow_id)
        check_input(flow, input_doc)
        with self._state_lock:
            if run_key:
                existing = self.runs.run_for_key(run_key)
                if existing:
                    return self._view(self._get_driver_or_replay(existing))
            run_id = f"run-{hashlib.sha256(f'{flow_id}|{time.time_ns()}|{run_key}|{id(input_doc)}'.encode()).hexdigest()[:16]}"
            delegation = self.tokens.delegate(ctx)
            header = self.runs.create(run_id, flow_id, input_doc, ctx.principal.principal_id,
                                      delegation.secret, run_key)
            driver = _Driver(run_id=run_id, flow=flow, header=header, cursor=flow.start_at,
                             run_start_mono=time.monotonic())
            self._drivers[run_id] = driver
        self._append(driver, STEP_STARTED, flow.start_at, {})
        driver.step_started = True
        driver.step_start_mono = time.monotonic()
        driver.step_start_wall = time.time()
        self._summaries[run_id] = self._summary_from_driver(driver)
        self._schedule(run_id, 0.0)
        return self._view(driver)

    def get_run(self, ctx: AuthContext, run_id: str) -> dict[str, Any]:
        driver = self._authorized_driver(ctx, run_id)
        return self._view(driver)

    def get_events(self, ctx: AuthContext, run_id: str) -> list[dict[str, Any]]:
        self._authorized_driver(ctx, run_id)
        return self.runs.events(run_id)

    def cancel_run(self, ctx: AuthContext, run_id: str) -> dict[str, Any]:
        if not ctx.allows("flows:run"):
            raise Unauthorized("scope flows:run required")
        driver = self._authorized_driver(ctx, run_id)
        with driver.lock:
            if driver.status in RUN_TERMINAL:
                return self._view(driver)
            driver.cancel_requested = True
        self._schedule(run_id, 0.0)
        return self._view(driver)

    def list_runs(self, ctx: AuthContext, flow_id: str | None = None, status: str | None = None,
                  since: float | None = None, until: float | None = None,
                  limit: int = 50, cursor: str | None = None) -> dict[str, Any]:
        if not ctx.allows("flows:read"):
            raise Unauthorized("scope flows:read required")
        admin = ctx.allows("flows:admin")
        me = ctx.principal.principal_id
        self._ensure_summaries()
        rows = [dict(s) for s in self._summaries.values()
                if (admin or s["owner"] == me)
                and (flow_id is None or s["flow_id"] == flow_id)
                and (status is None or s["status"] == status)
                and (since is None or s["started_at"] >= since)
                and (until is None or s["started_at"] <= until)]
        rows.sort(key=lambda r: (-r["started_at"], r["run_id"]))
        if cursor:
            try:
                c_started, c_run = base64.urlsafe_b64decode(cursor.encode()).decode().split("|", 1)
                c_key = (-float(c_started), c_run)
                rows = [r for r in rows if (-r["started_at"], r["run_id"]) > c_key]
            except (ValueError, UnicodeDecodeError):
                raise ValidationFailed("bad pagination cursor") from None
        page = rows[:limit]
        next_cursor = None
        if len(rows) > limit and page:
            last = page[-1]
            next_cursor = base64.urlsafe_b64encode(f"{last['started_at']}|{last['run_id']}".encode()).decode()
        return {"runs": [self._wire_summary(r) for r in page], "cursor": next_cursor}

    # -- views -------------------------------------------------------------------------

    def _authorized_driver(self, ctx: AuthContext, run_id: str) -> _Driver:
        if not ctx.allows("flows:read") and not ctx.allows("flows:run"):
            raise Unauthorized("flows scope required")
        driver = self._get_driver_or_replay(run_id)
        if driver.header["owner"] != ctx.principal.principal_id and not ctx.allows("flows:admin"):
            raise Unauthorized(f"run {run_id} belongs to another principal")
        return driver

    def _get_driver_or_replay(self, run_id: str) -> _Driver:
        with self._state_lock:
            driver = self._drivers.get(run_id)
        if driver is not None:
            return driver
        return self._load_driver(run_id)

    def _load_driver(self, run_id: str) -> _Driver:
        header = self.runs.header(run_id)
        flow, _doc = self.flows.get(header["flow_id"])
        return replay(flow, header, self.runs.events(run_id))

    def _view(self, driver: _Driver) -> dict[str, Any]:
        with driver.lock:
            return {
                "run_id": driver.run_id,
                "flow_id": driver.header["flow_id"],
                "status": driver.status,
                "cursor": driver.cursor,
                "input": driver.header["input"],
                "state_doc": driver.state_doc,
                "owner": driver.header["owner"],
                "started_at": iso(driver.header["started_at"]),
                "ended_at": iso(driver.ended_at),
                "totals": dict(driver.totals),
            }

    def _summary_from_driver(self, driver: _Driver) -> dict[str, Any]:
        return {"run_id": driver.run_id, "flow_id": driver.header["flow_id"],
                "status": driver.status, "owner": driver.header["owner"],
                "started_at": driver.header["started_at"], "ended_at": driver.ended_at,
                "cursor": driver.cursor}

    @staticmethod
    def _wire_summary(s: dict[str, Any]) -> dict[str, Any]:
        out = dict(s)
        out["started_at"] = iso(s["started_at"])
        out["ended_at"] = iso(s["ended_at"])
        return out

    def _ensure_summaries(self) -> None:
        known = set(self._summaries)
        for run_id in self.runs.list_ids():
            if run_id not in known:
                try:
                    self._summaries[run_id] = self._summary_from_driver(self._load_driver(run_id))
                except FabricError:
                    continue

    # -- scheduling ----------------------------------------------------------------------

    def _schedule(self, run_id: str, delay: float) -> None:
        with self._cv:
            self._tick += 1
            self._due[run_id] = self._tick
            heapq.heappush(self._heap, (time.monotonic() + delay, self._tick, run_id))
            self._cv.notify()

    def _work_loop(self) -> None:
        while self._running:
            with self._cv:
                while self._running:
                    if self._heap and self._heap[0][0] <= time.monotonic():
                        due, tick, run_id = heapq.heappop(self._heap)
                        if self._due.get(run_id) == tick:
                            break
                        continue
                    timeout = 0.2
                    if self._heap:
                        timeout = min(timeout, max(0.0, self._heap[0][0] - time.monotonic()))
                    self._cv.wait(timeout)
                else:
                    return
            try:
                self._advance(run_id)
            except EngineKilled:
                return
            except Exception:  # pragma: no cover - defensive
                import logging

                logging.getLogger("flowfabric.engine").exception("advance(%s) blew up", run_id)

    # -- the run state machine --------------------------------------------------------------

    def _advance(self, run_id: str) -> None:
        with self._state_lock:
            driver = self._drivers.get(run_id)
        if driver is None:
            return
        with driver.lock:
            if driver.status != RUN_ACTIVE or self._killed:
                return
            if driver.cancel_requested:
                self._do_cancel(driver)
                return
            if driver.cursor is END:
                self._finish_run(driver)
                return
            if driver.inflight is None:
                self._do_submit(driver)
            else:
                self._do_poll(driver)

    def _do_cancel(self, driver: _Driver) -> None:
        inflight = driver.inflight
        if inflight is not None and inflight.action_id:
            state = driver.flow.states.get(driver.cursor)
            if isinstance(state, ActionState):
                try:
                    transport = self.providers.resolve(state.provider_url)
                    transport.cancel(driver.header["delegation"], inflight.action_id)
                except FabricError:
                    pass
        self._append(driver, RUN_CANCELED_EV, driver.cursor or "", {})
        self._terminal(driver, RUN_CANCELED)

    def _do_submit(self, driver: _Driver) -> None:
        state = driver.flow.states[driver.cursor]
        if not driver.step_started:
            self._append(driver, STEP_STARTED, driver.cursor, {})
            driver.step_started = True
            driver.step_start_mono = time.monotonic()
            driver.step_start_wall = time.time()

        if isinstance(state, ChoiceState):
            self._do_choice(driver, state)
            return

        run_state = {"input": driver.header["input"], **driver.state_doc}
        try:
            params = resolve_parameters(state.parameters, run_state)
        except FabricError as exc:
            self._fail_step(driver, {"code": exc.code, "message": exc.message})
            return

        request_id = idem_key(driver.run_id, driver.cursor, driver.attempt)
        owner = driver.header["owner"]
        try:
            self._fault("pre_submit")
            transport = self.providers.resolve(state.provider_url)
            wire = transport.run(driver.header["delegation"], request_id, params,
                                 monitor_by=(owner,), manage_by=(owner,))
            self._fault("post_submit")
        except EngineKilled:
            raise
        except (ProviderUnreachable, ProviderBusy) as exc:
            self._transport_retry(driver, exc)
            return
        except FabricError as exc:  # provider rejected the request outright
            self._fail_step(driver, {"code": exc.code, "message": exc.message})
            return

        driver.transport_failures = 0
        driver.inflight = _Inflight(request_id=request_id, action_id=wire.get("action_id"),
                                    attempt=driver.attempt,
                                    submitted_mono=time.monotonic(), submitted_wall=time.time())
        self._append(driver, ACTION_SUBMITTED, driver.cursor,
                     {"request_id": request_id, "action_id": wire.get("action_id"),
                      "attempt": driver.attempt, "kind": state.action_kind})
        self._fault("post_submit_logged")

        if wire["status"] in (SUCCEEDED, FAILED):
            self._handle_terminal_action(driver, state, wire)
        else:
            self._schedule(driver.run_id, self.backoff.next_poll_interval(0))

    def _do_choice(self, driver: _Driver, state: ChoiceState) -> None:
        run_state = {"input": driver.header["input"], **driver.state_doc}
        try:
            branch_true = state.evaluate(run_state)
        except FabricError as exc:
            self._fail_step(driver, {"code": exc.code, "message": exc.message})
            return
        nxt = state.if_true if branch_true else state.if_false
        self._append(driver, STEP_COMPLETED, driver.cursor, {
            "action_kind": "choice", "result_path": None, "result": None,
            "runtime_s": 0.0, "queue_wait_s": None, "step_wall_s": driver.step_wall_s(),
            "branch": "if_true" if branch_true else "if_false", "next": nxt,
        })
        driver.cursor = nxt
        driver.step_started = False
        driver.attempt = 0
        if nxt is END:
            self._finish_run(driver)
        else:
            self._schedule(driver.run_id, 0.0)

    def _do_poll(self, driver: _Driver) -> None:
        state = driver.flow.states[driver.cursor]
        inflight = driver.inflight
        try:
            transport = self.providers.resolve(state.provider_url)
            if inflight.action_id:
                wire = transport.status(driver.header["delegation"], inflight.action_id)
            else:
                # crash window: submitted but never learned the action id; the
                # idempotency key makes re-running safe.
                wire = transport.run(driver.header["delegation"], inflight.request_id,
                                     resolve_parameters(state.parameters,
                                                        {"input": driver.header["input"], **driver.state_doc}),
                                     monitor_by=(driver.header["owner"],), manage_by=(driver.header["owner"],))
                inflight.action_id = wire.get("action_id")
        except (ProviderUnreachable, ProviderBusy) as exc:
            self._transport_retry(driver, exc)
            return
        except FabricError as exc:
            self._fail_step(driver, {"code": exc.code, "message": exc.message})
            return

        driver.transport_failures = 0
        inflight.polls += 1
        self._append(driver, ACTION_POLLED, driver.cursor,
                     {"poll": inflight.polls, "status": wire["status"], "action_id": inflight.action_id})

        if wire["status"] in (ACTIVE, INACTIVE):
            self._schedule(driver.run_id, self.backoff.next_poll_interval(inflight.polls))
        else:
            self._handle_terminal_action(driver, state, wire)

    def _handle_terminal_action(self, driver: _Driver, state: ActionState, wire: dict[str, Any]) -> None:
        if wire["status"] == SUCCEEDED:
            self._complete_step(driver, state, wire)
        else:
            self._retry_or_fail(driver, state, wire)

    def _complete_step(self, driver: _Driver, state: ActionState, wire: dict[str, Any]) -> None:
        details = wire.get("details") or {}
        set_path(driver.state_doc, state.result_path, details)
        run_state = {"input": driver.header["input"], **driver.state_doc}
        try:
            nxt = next_state(driver.flow, driver.cursor, "SUCCEEDED", run_state)
        except FabricError as exc:
            self._fail_step(driver, {"code": exc.code, "message": exc.message})
            return
        runtime_s = float(wire.get("runtime_s") or 0.0)
        total_key = KIND_TOTALS.get(state.action_kind)
        if total_key:
            driver.totals[total_key] += runtime_s
        self._fault("pre_complete")
        self._append(driver, STEP_COMPLETED, driver.cursor, {
            "action_kind": state.action_kind, "result_path": state.result_path,
            "result": details, "runtime_s": runtime_s,
            "queue_wait_s": wire.get("queue_wait_s"),
            "step_wall_s": driver.step_wall_s(),
            "action_id": wire.get("action_id"), "request_id": driver.inflight.request_id,
            "attempt": driver.inflight.attempt, "next": nxt,
        })
        self._fault("post_complete")
        self._release_quietly(state, wire.get("action_id"), driver)
        driver.inflight = None
        driver.step_started = False
        driver.attempt = 0
        driver.cursor = nxt
        if nxt is END:
            self._finish_run(driver)
        else:
            self._schedule(driver.run_id, 0.0)

    def _retry_or_fail(self, driver: _Driver, state: ActionState, wire: dict[str, Any]) -> None:
        details = wire.get("details") or {}
        if driver.cancel_requested:
            self._do_cancel(driver)
            return
        if driver.attempt + 1 < self.retry.max_attempts:
            delay = self.retry.delays[driver.attempt]
            self._append(driver, ACTION_POLLED, driver.cursor,
                         {"status": FAILED, "retry_attempt": driver.attempt + 1,
                          "action_id": wire.get("action_id"), "error": details})
            self._release_quietly(state, wire.get("action_id"), driver)
            driver.inflight = None
            driver.attempt += 1
            self._schedule(driver.run_id, delay)
        else:
            self._fail_step(driver, details or {"code": "ActionFailed", "message": "provider reported failure"})

    def _transport_retry(self, driver: _Driver, exc: FabricError) -> None:
        if driver.transport_failures < len(self.retry.delays):
            delay = self.retry.delays[driver.transport_failures]
            driver.transport_failures += 1
            self._schedule(driver.run_id, delay)
        else:
            self._fail_step(driver, {"code": exc.code, "message": exc.message})

    def _fail_step(self, driver: _Driver, error: dict[str, Any]) -> None:
        step = driver.cursor
        state = driver.flow.states.get(step)
        on_fail = state.on_fail if isinstance(state, ActionState) else None
        self._append(driver, STEP_FAILED, step, {
            "error": error, "step_wall_s": driver.step_wall_s(), "next": on_fail,
        })
        driver.inflight = None
        driver.step_started = False
        driver.attempt = 0
        if on_fail:
            driver.cursor = on_fail
            self._schedule(driver.run_id, 0.0)
        else:
            self._append(driver, RUN_FAILED_EV, step, {"error": error, "runtime_s": driver.elapsed_s()})
            self._terminal(driver, RUN_FAILED)

    def _finish_run(self, driver: _Driver) -> None:
        runtime_s = driver.elapsed_s()
        provider_total = sum(driver.totals.values())
        self._append(driver, RUN_COMPLETED, "", {
            "runtime_s": runtime_s,
            "totals": dict(driver.totals),
            "oh_s": runtime_s - provider_total,
        })
        self._terminal(driver, RUN_SUCCEEDED)

    def _terminal(self, driver: _Driver, status: str) -> None:
        driver.status = status
        driver.ended_at = time.time()
        self._summaries[driver.run_id] = self._summary_from_driver(driver)
        with self._state_lock:
            self._drivers.pop(driver.run_id, None)
        self.runs.close_log(driver.run_id)

    def _release_quietly(self, state: ActionState, action_id: str | None, driver: _Driver) -> None:
        if not action_id:
            return
        try:
            self._fault("pre_release")
            transport = self.providers.resolve(state.provider_url)
            transport.release(driver.header["delegation"], action_id)
        except EngineKilled:
            raise
        except FabricError:
            pass

    # -- event persistence ------------------------------------------------------------------

    def _append(self, driver: _Driver, kind: str, step: str, detail: dict[str, Any]) -> None:
        if self._killed:
            raise EngineKilled("append after kill")
        driver.seq += 1
        now_wall = time.time()
        self.runs.append(driver.run_id, {
            "seq": driver.seq,
            "ts": iso(now_wall),
            "wall": now_wall,
            "mono": time.monotonic(),
            "kind": kind,
            "step": step,
            "detail": detail,
        })
        summary = self._summaries.get(driver.run_id)
        if summary is not None:
            summary["cursor"] = driver.cursor
