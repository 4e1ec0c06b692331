"""Conformance kit for the action-provider protocol.

Fuzzes randomized call sequences (run, duplicate run, status, cancel,
release) against any provider through any transport and checks the
protocol contract from the caller's side:

* observed lifecycle transitions are legal (ACTIVE -> INACTIVE/terminal,
  INACTIVE -> ACTIVE/terminal, terminal states never change);
* terminal snapshots are byte-identical across repeated polls;
* run() is idempotent per request_id (stable action_id);
* status() never mutates observable state;
* release() of a terminal action makes it unknown; releasing an active
  action is refused.

The same harness runs against every provider with no provider-specific
logic; per-provider request bodies come from a body factory, and an
optional "poker" drives human-in-the-loop actions toward completion.
It can also replay golden wire transcripts to pin the wire shape.
"""
from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .errors import FabricError
from .model import canonical_json
from .protocol import ACTIVE, FAILED, INACTIVE, SUCCEEDED, ActionStillActive, UnknownAction

OBSERVABLE = {
    ACTIVE: {ACTIVE, INACTIVE, SUCCEEDED, FAILED},
    INACTIVE: {INACTIVE, ACTIVE, SUCCEEDED, FAILED},
    SUCCEEDED: {SUCCEEDED},
    FAILED: {FAILED},
}


@dataclass
class Violation:
    sequence: int
    op: str
    message: str


@dataclass
class ConformanceReport:
    sequences: int = 0
    ops: int = 0
    terminal_seen: int = 0
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        state = "PASS" if self.ok else f"FAIL ({len(self.violations)} violations)"
        return f"{state}: {self.sequences} sequences, {self.ops} ops, {self.terminal_seen} reached terminal"


@dataclass
class ConformanceHarness:
    transport: Any
    token: str
    body_factory: Callable[[random.Random, int], dict[str, Any]]
    poker: Callable[[str, random.Random], None] | None = None

    def run_sequences(self, n: int, seed: int = 0, ops_per_sequence: tuple[int, int] = (3, 9)) -> ConformanceReport:
        report = ConformanceReport()
        for i in range(n):
            rng = random.Random(seed * 1_000_003 + i)
            self._one_sequence(report, rng, i, rng.randint(*ops_per_sequence))
            report.sequences += 1
        return report

    # -- single fuzzed sequence ------------------------------------------------------

    def _one_sequence(self, report: ConformanceReport, rng: random.Random, i: int, n_ops: int) -> None:
        request_id = f"conf-{i}-{rng.randint(0, 1 << 30)}"
        body = self.body_factory(rng, i)

        def bad(op: str, message: str) -> None:
            report.violations.append(Violation(i, op, message))

        try:
            wire = self.transport.run(self.token, request_id, body)
        except FabricError as exc:
            bad("run", f"initial run refused: {exc.code}: {exc.message}")
            return
        report.ops += 1
        action_id = wire.get("action_id")
        if not action_id:
            bad("run", "run() returned no action_id")
            return
        last_status = wire.get("status")
        if last_status not in OBSERVABLE:
            bad("run", f"unknown status {last_status!r}")
            return
        terminal_wire: str | None = canonical_json(wire) if last_status in (SUCCEEDED, FAILED) else None
        released = False
        canceled = False

        for _ in range(n_ops):
            op = rng.choices(["status", "dup_run", "cancel", "release", "poke"],
                             weights=[50, 15, 10, 10, 15])[0]
            report.ops += 1
            try:
                if op == "status":
                    if released:
                        self._expect_unknown(bad, "status", lambda: self.transport.status(self.token, action_id))
                        continue
                    wire = self.transport.status(self.token, action_id)
                    last_status, terminal_wire = self._check_observation(
                        bad, "status", wire, action_id, last_status, terminal_wire)
                elif op == "dup_run":
                    if released:
                        continue  # released records legitimately forget the request_id
                    wire = self.transport.run(self.token, request_id, body)
                    if wire.get("action_id") != action_id:
                        bad("dup_run", f"idempotency broken: {wire.get('action_id')} != {action_id}")
                    last_status, terminal_wire = self._check_observation(
                        bad, "dup_run", wire, action_id, last_status, terminal_wire)
                elif op == "cancel":
                    if released:
                        self._expect_unknown(bad, "cancel", lambda: self.transport.cancel(self.token, action_id))
                        continue
                    before_terminal = terminal_wire
                    wire = self.transport.cancel(self.token, action_id)
                    canceled = True
                    if wire["status"] not in (SUCCEEDED, FAILED):
                        bad("cancel", f"cancel left status {wire['status']}")
                    if before_terminal is not None and canonical_json(wire) != before_terminal:
                        bad("cancel", "cancel mutated an already-terminal action")
                    last_status, terminal_wire = self._check_observation(
                        bad, "cancel", wire, action_id, last_status, terminal_wire)
                elif op == "release":
                    if released:
                        self._expect_unknown(bad, "release", lambda: self.transport.release(self.token, action_id))
                        continue
                    try:
                        self.transport.release(self.token, action_id)
                    except ActionStillActive:
                        if last_status in (SUCCEEDED, FAILED):
                            bad("release", "refused to release a terminal action")
                        continue
                    # success implies the action was terminal at release time
                    # (it may have completed since our last observation)
                    released = True
                    self._expect_unknown(bad, "release",
                                         lambda: self.transport.status(self.token, action_id))
                elif op == "poke" and self.poker is not None and not released:
                    self.poker(action_id, rng)
            except UnknownAction:
                if not released:
                    bad(op, "action vanished without release")
            except FabricError as exc:
                bad(op, f"unexpected error {exc.code}: {exc.message}")

        if terminal_wire is not None:
            report.terminal_seen += 1
        # leave no residue: finish and release whatever is still around
        self._cleanup(action_id, released, last_status)

    def _check_observation(self, bad, op: str, wire: dict[str, Any], action_id: str,
                           last_status: str, terminal_wire: str | None) -> tuple[str, str | None]:
        status = wire.get("status")
        if wire.get("action_id") != action_id:
            bad(op, f"action_id changed: {wire.get('action_id')} != {action_id}")
        if status not in OBSERVABLE.get(last_status, set()):
            bad(op, f"illegal observable transition {last_status} -> {status}")
        if terminal_wire is not None:
            if canonical_json(wire) != terminal_wire:
                bad(op, "terminal snapshot changed between polls")
            return last_status, terminal_wire
        if status in (SUCCEEDED, FAILED):
            terminal = canonical_json(wire)
            if status == SUCCEEDED and wire.get("runtime_s") is None:
                bad(op, "terminal SUCCEEDED without runtime_s")
            return status, terminal
        return status, None

    def _expect_unknown(self, bad, op: str, call) -> None:
        try:
            call()
            bad(op, "operation on released action did not raise UnknownAction")
        except UnknownAction:
            pass
        except FabricError as exc:
            bad(op, f"expected UnknownAction, got {exc.code}")

    def _cleanup(self, action_id: str, released: bool, last_status: str) -> None:
        if released:
            return
        try:
            wire = self.transport.status(self.token, action_id)
            if wire["status"] not in (SUCCEEDED, FAILED):
                self.transport.cancel(self.token, action_id)
            self.transport.release(self.token, action_id)
        except FabricError:
            pass


# -- golden wire transcripts ----------------------------------------------------------


def replay_transcript(transport, token: str, transcript_path: Path,
                      substitutions: dict[str, str] | None = None) -> list[str]:
    """Replay a recorded exchange and verify response shapes.

    Each transcript record: {"op", "request", "expect": {"status"?, "keys"?,
    "error_code"?}}. ${placeholders} in request fields are substituted, and
    ${action_id} binds to the id returned by the first run. Returns a list
    of mismatch descriptions (empty = pass).
    """
    subs = dict(substitutions or {})
    problems: list[str] = []
    records = [json.loads(line) for line in Path(transcript_path).read_text().splitlines() if line.strip()]
    for n, rec in enumerate(records):
        op = rec["op"]
        request = _substitute(rec.get("request", {}), subs)
        expect = rec.get("expect", {})
        try:
            if op == "run":
                wire = transport.run(token, request["request_id"], request["body"])
                subs.setdefault("action_id", wire.get("action_id", ""))
            elif op == "status":
                wire = transport.status(token, request["action_id"])
            elif op == "cancel":
                wire = transport.cancel(token, request["action_id"])
            elif op == "release":
                wire = transport.release(token, request["action_id"])
            elif op == "introspect":
                wire = transport.introspect()
            elif op == "wait_terminal":
                wire = _wait_terminal(transport, token, subs["action_id"],
                                      timeout_s=float(request.get("timeout_s", 30)))
            else:
                problems.append(f"[{n}] unknown transcript op {op!r}")
                continue
            if expect.get("error_code"):
                problems.append(f"[{n}] {op}: expected error {expect['error_code']}, got success")
                continue
            if "status" in expect and wire.get("status") != expect["status"]:
                problems.append(f"[{n}] {op}: status {wire.get('status')} != {expect['status']}")
            for key in expect.get("keys", []):
                if key not in wire:
                    problems.append(f"[{n}] {op}: response missing key {key!r}")
        except FabricError as exc:
            if exc.code != expect.get("error_code"):
                problems.append(f"[{n}] {op}: unexpected error {exc.code}: {exc.message}")
    return problems


def _substitute(doc: Any, subs: dict[str, str]) -> Any:
    if isinstance(doc, str):
        for key, value in subs.items():
            doc = doc.replace("${" + key + "}", str(value))
        return doc
    if isinstance(doc, dict):
        return {k: _substitute(v, subs) for k, v in doc.items()}
    if isinstance(doc, list):
        return [_substitute(v, subs) for v in doc]
    return doc


def _wait_terminal(transport, token: str, action_id: str, timeout_s: float = 30.0) -> dict[str, Any]:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        wire = transport.status(token, action_id)
        if wire["status"] in (SUCCEEDED, FAILED):
            return wire
        time.sleep(0.02)
    raise FabricError(f"action {action_id} never reached terminal in transcript replay")
