"""File-event trigger daemon: watches directories, batches creations by
rule, and starts flow runs exactly once per batch.

A file counts once its size is stable across two polls (detectors write
large files non-atomically). Every decision is journaled and fsynced in
order: file observed -> fire intent -> fire ack(run_id). The intent is
durable before start_run is called and the run key is derived from the
rule and batch sequence, so a crash anywhere leaves either a re-issuable
intent or a completed ack, never a duplicate or lost batch. Threshold
rules watch completions of a source flow, fire once when the cumulative
value first reaches the minimum, then fire on every later completion.
"""
from __future__ import annotations

import fnmatch
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import FabricError, ValidationFailed
from .model import lookup_path, resolve_parameters
from .storage import NdjsonLog, atomic_write_json, read_ndjson

EVERY_N = "every_n_files"
THRESHOLD = "threshold_from_results"
ON_COMPLETION = "on_flow_completion"


class MissingResultPath(FabricError):
    code = "MissingResultPath"


class DaemonKilled(RuntimeError):
    pass


@dataclass(frozen=True)
class TriggerRule:
    rule_id: str
    kind: str
    target_flow: str
    input_template: dict[str, Any] = field(default_factory=dict)
    watch_dir: str | None = None
    glob: str = "*"
    n: int = 1
    source_flow: str | None = None
    result_path: str | None = None
    min_total: float | None = None
    rel_base: str | None = None  # batch paths also exposed relative to this root

    def __post_init__(self):
        if self.kind not in (EVERY_N, THRESHOLD, ON_COMPLETION):
            raise ValidationFailed(f"rule {self.rule_id}: unknown kind {self.kind!r}")
        if self.kind == EVERY_N:
            if self.n < 1:
                raise ValidationFailed(f"rule {self.rule_id}: n must be >= 1")
            if not self.watch_dir:
                raise ValidationFailed(f"rule {self.rule_id}: every_n_files needs watch_dir")
        if self.kind == THRESHOLD and (not self.source_flow or not self.result_path or self.min_total is None):
            raise ValidationFailed(f"rule {self.rule_id}: threshold rule needs source_flow, result_path, min")
        if self.kind == ON_COMPLETION and not self.source_flow:
            raise ValidationFailed(f"rule {self.rule_id}: on_flow_completion needs source_flow")


def rules_from_doc(doc: dict[str, Any]) -> list[TriggerRule]:
    rules = []
    for r in doc.get("rules", []):
        rules.append(TriggerRule(
            rule_id=r["rule_id"], kind=r["kind"], target_flow=r["target_flow"],
            input_template=r.get("input_template", {}),
            watch_dir=r.get("watch_dir"), glob=r.get("glob", "*"), n=int(r.get("n", 1)),
            source_flow=r.get("source_flow"), result_path=r.get("result_path"),
            min_total=r.get("min"), rel_base=r.get("rel_base"),
        ))
    if len({r.rule_id for r in rules}) != len(rules):
        raise ValidationFailed("duplicate rule_id in trigger config")
    return rules


@dataclass
class _RuleState:
    rule: TriggerRule
    journal: NdjsonLog
    seen: set = field(default_factory=set)          # canonical file paths
    ordered_files: list = field(default_factory=list)
    intents: dict = field(default_factory=dict)     # seq -> {"files": [...], "context": {...}}
    acks: dict = field(default_factory=dict)        # seq -> run_id
    dead: dict = field(default_factory=dict)        # seq -> error text
    completions_seen: set = field(default_factory=set)
    completions_count: int = 0
    cumulative: float = 0.0
    threshold_fired: bool = False
    suspended: bool = False
    watching: dict = field(default_factory=dict)    # path -> (size, first_seen, last_size_change)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    @property
    def batches_fired(self) -> int:
        return len(self.intents)

    @property
    def pending(self) -> list[str]:
        consumed = self.batches_fired * self.rule.n
        return self.ordered_files[consumed:]


class TriggerDaemon:
    def __init__(self, client, rules: list[TriggerRule], data_dir: Path,
                 poll_interval_s: float = 0.25, debounce_s: float = 0.5,
                 completion_poll_s: float = 0.5, start_run_retries: int = 3,
                 retry_delay_s: float = 0.3, fault=None):
        self.client = client
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.poll_interval_s = poll_interval_s
        self.debounce_s = debounce_s
        self.completion_poll_s = completion_poll_s
        self.start_run_retries = start_run_retries
        self.retry_delay_s = retry_delay_s
        self._fault_hook = fault
        self._killed = False
        self._running = False
        self._threads: list[threading.Thread] = []
        self._states: dict[str, _RuleState] = {}
        for rule in rules:
            journal = NdjsonLog(self.data_dir / f"{rule.rule_id}.journal")
            state = _RuleState(rule=rule, journal=journal)
            self._states[rule.rule_id] = state
        self.replay_journal()

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> "TriggerDaemon":
        self._running = True
        self._killed = False
        # re-issue fired-but-unacked intents from before a crash
        for state in self._states.values():
            for seq in sorted(set(state.intents) - set(state.acks) - set(state.dead)):
                self._issue(state, seq, state.intents[seq])
        for state in self._states.values():
            if state.rule.kind == EVERY_N:
                t = threading.Thread(target=self._watch_loop, args=(state,),
                                     name=f"watch-{state.rule.rule_id}", daemon=True)
                t.start()
                self._threads.append(t)
            else:
                t = threading.Thread(target=self._completion_loop, args=(state,),
                                     name=f"completions-{state.rule.rule_id}", daemon=True)
                t.start()
                self._threads.append(t)
        return self

    def stop(self) -> None:
        self._running = False
        for t in self._threads:
            t.join(timeout=5)
        self._threads.clear()
        for state in self._states.values():
            state.journal.close()

    def kill(self) -> None:
        """Abrupt halt, as in a crash: stop all work immediately; journals
        keep whatever was durable."""
        self._killed = True
        self._running = False
        for t in self._threads:
            t.join(timeout=5)
        self._threads.clear()

    def _fault(self, label: str) -> None:
        if self._killed:
            raise DaemonKilled(label)
        if self._fault_hook is not None:
            self._fault_hook(label)

    # -- journal replay -----------------------------------------------------------

    def replay_journal(self) -> None:
        for state in self._states.values():
            with state.lock:
                state.seen.clear()
                state.ordered_files.clear()
                state.intents.clear()
                state.acks.clear()
                state.dead.clear()
                state.completions_seen.clear()
                state.completions_count = 0
                state.cumulative = 0.0
                state.threshold_fired = False
                for rec in read_ndjson(self.data_dir / f"{state.rule.rule_id}.journal"):
                    kind = rec.get("kind")
                    if kind == "file":
                        if rec["path"] not in state.seen:
                            state.seen.add(rec["path"])
                            state.ordered_files.append(rec["path"])
                    elif kind == "intent":
                        state.intents[rec["seq"]] = {"files": rec.get("files", []),
                                                     "context": rec.get("context", {})}
                        if rec.get("threshold"):
                            state.threshold_fired = True
                    elif kind == "fired":
                        state.acks[rec["seq"]] = rec.get("run_id")
                    elif kind == "dead":
                        state.dead[rec["seq"]] = rec.get("error", "")
                    elif kind == "completion":
                        if rec["run_id"] not in state.completions_seen:
                            state.completions_seen.add(rec["run_id"])
                            state.completions_count += 1
                            state.cumulative += float(rec.get("value") or 0.0)
                    elif kind == "reset":
                        state.cumulative = 0.0
                        state.threshold_fired = False

    # -- file watching ---------------------------------------------------------------

    def _watch_loop(self, state: _RuleState) -> None:
        last_status = 0.0
        while self._running:
            try:
                self._scan_once(state)
            except DaemonKilled:
                return
            except FabricError:
                pass
            if time.monotonic() - last_status > 0.5:
                self._write_status()
                last_status = time.monotonic()
            time.sleep(self.poll_interval_s)

    def _scan_once(self, state: _RuleState) -> None:
        rule = state.rule
        watch = Path(rule.watch_dir)
        if not watch.is_dir():
            if not state.suspended:
                state.suspended = True
                self._write_status()
            return
        if state.suspended:
            state.suspended = False
            self._write_status()
        now = time.monotonic()
        with state.lock:
            try:
                entries = [e for e in watch.iterdir()
                           if e.is_file() and fnmatch.fnmatch(e.name, rule.glob)]
            except OSError:
                return
            newly_stable: list[tuple[str, int]] = []
            for entry in entries:
                path = str(entry.resolve())
                if path in state.seen:
                    continue
                try:
                    stat = entry.stat()
                except OSError:
                    continue
                size, inode = stat.st_size, stat.st_ino
                prev = state.watching.get(path)
                if prev is None:
                    state.watching[path] = (size, now, now)
                    continue
                prev_size, first_seen, last_change = prev
                if size != prev_size:
                    state.watching[path] = (size, first_seen, now)
                    continue
                # size stable across two polls and the debounce window elapsed
                if now - last_change >= self.debounce_s:
                    newly_stable.append((path, inode))
            for path, inode in sorted(newly_stable):
                self._fault("pre_file_journal")
                state.journal.append({"kind": "file", "path": path, "inode": inode, "ts": time.time()})
                self._fault("post_file_journal")
                state.seen.add(path)
                state.ordered_files.append(path)
                state.watching.pop(path, None)
            while len(state.pending) >= rule.n:
                batch = state.pending[:rule.n]
                seq = state.batches_fired
                self._fire_batch(state, seq, batch)

    # -- firing ---------------------------------------------------------------------

    def _fire_batch(self, state: _RuleState, seq: int, files: list[str],
                    context_extra: dict[str, Any] | None = None, threshold: bool = False) -> None:
        rule = state.rule
        batch: dict[str, Any] = {
            "files": [Path(f).name for f in files],
            "paths": files,
            "first": Path(files[0]).name if files else "",
            "count": len(files),
            "seq": seq,
            "dir": rule.watch_dir or "",
        }
        if rule.rel_base:
            base = Path(rule.rel_base).resolve()
            rels = []
            for f in files:
                try:
                    rels.append(str(Path(f).resolve().relative_to(base)))
                except ValueError:
                    rels.append(Path(f).name)
            batch["files_rel"] = rels
            batch["first_rel"] = rels[0] if rels else ""
        context = {"batch": batch, "rule": {"rule_id": rule.rule_id}}
        if context_extra:
            context.update(context_extra)
        self._fault("pre_intent")
        state.journal.append({"kind": "intent", "seq": seq, "files": files,
                              "context": context, "threshold": threshold, "ts": time.time()})
        state.intents[seq] = {"files": files, "context": context}
        if threshold:
            state.threshold_fired = True
        self._fault("post_intent")
        self._issue(state, seq, state.intents[seq])

    def _issue(self, state: _RuleState, seq: int, intent: dict[str, Any]) -> None:
        rule = state.rule
        try:
            input_doc = resolve_parameters(rule.input_template, intent["context"])
        except FabricError as exc:
            state.journal.append({"kind": "dead", "seq": seq, "error": f"{exc.code}: {exc.message}"})
            state.dead[seq] = exc.message
            return
        run_key = f"trigger:{rule.rule_id}:{seq}"
        last_error = None
        for attempt in range(self.start_run_retries):
            self._fault("pre_start_run")
            try:
                view = self.client.start_run(rule.target_flow, input_doc, run_key=run_key)
                self._fault("post_start_run")
                state.journal.append({"kind": "fired", "seq": seq, "run_id": view["run_id"], "ts": time.time()})
                state.acks[seq] = view["run_id"]
                return
            except DaemonKilled:
                raise
            except FabricError as exc:
                last_error = exc
                time.sleep(self.retry_delay_s * (attempt + 1))
        state.journal.append({"kind": "dead", "seq": seq,
                              "error": f"{last_error.code}: {last_error.message}" if last_error else "unknown"})
        state.dead[seq] = last_error.message if last_error else "unknown"

    # -- completion watching -----------------------------------------------------------

    def _completion_loop(self, state: _RuleState) -> None:
        last_status = 0.0
        while self._running:
            try:
                self._poll_completions(state)
            except DaemonKilled:
                return
            except FabricError:
                pass
            if time.monotonic() - last_status > 0.5:
                self._write_status()
                last_status = time.monotonic()
            time.sleep(self.completion_poll_s)

    def _poll_completions(self, state: _RuleState) -> None:
        rule = state.rule
        page = self.client.list_runs(flow_id=rule.source_flow, status="SUCCEEDED", limit=500)
        runs = sorted(page.get("runs", []), key=lambda r: (r["started_at"] or "", r["run_id"]))
        with state.lock:
            for run in runs:
                run_id = run["run_id"]
                if run_id in state.completions_seen:
                    continue
                value = 0.0
                if rule.kind == THRESHOLD:
                    try:
                        view = self.client.get_run(run_id)
                        value = float(lookup_path(view.get("state_doc", {}), rule.result_path))
                    except (KeyError, TypeError, ValueError):
                        state.journal.append({"kind": "completion", "run_id": run_id, "value": None,
                                              "error": "MissingResultPath"})
                        state.completions_seen.add(run_id)
                        state.completions_count += 1
                        continue
                self._fault("pre_completion_journal")
                state.journal.append({"kind": "completion", "run_id": run_id, "value": value, "ts": time.time()})
                state.completions_seen.add(run_id)
                state.completions_count += 1
                state.cumulative += value
                self._evaluate_completion_rules(state, run_id)

    def _evaluate_completion_rules(self, state: _RuleState, run_id: str) -> None:
        rule = state.rule
        context = {"completion": {"run_id": run_id, "count": state.completions_count},
                   "threshold": {"cumulative": state.cumulative}}
        if rule.kind == ON_COMPLETION:
            self._fire_batch(state, state.batches_fired, [], context_extra=context)
        elif rule.kind == THRESHOLD:
            if not state.threshold_fired:
                if state.cumulative >= float(rule.min_total):
                    self._fire_batch(state, state.batches_fired, [], context_extra=context, threshold=True)
            else:
                # after the first fire, behave like on_flow_completion
                self._fire_batch(state, state.batches_fired, [], context_extra=context)

    # -- reporting ---------------------------------------------------------------------

    def status(self) -> dict[str, Any]:
        rules = {}
        for state in self._states.values():
            with state.lock:
                rules[state.rule.rule_id] = {
                    "kind": state.rule.kind,
                    "target_flow": state.rule.target_flow,
                    "files_seen": len(state.seen),
                    "pending": len(state.pending),
                    "batches_fired": state.batches_fired,
                    "acked": len(state.acks),
                    "dead": len(state.dead),
                    "completions_seen": state.completions_count,
                    "cumulative": state.cumulative,
                    "threshold_fired": state.threshold_fired,
                    "suspended": state.suspended,
                }
        return {"rules": rules, "ts": time.time()}

    def dead_letters(self) -> list[dict[str, Any]]:
        out = []
        for state in self._states.values():
            with state.lock:
                for seq, error in sorted(state.dead.items()):
                    out.append({"rule_id": state.rule.rule_id, "seq": seq, "error": error,
                                "files": state.intents.get(seq, {}).get("files", [])})
        return out

    def reset_threshold(self, rule_id: str) -> None:
        state = self._states[rule_id]
        with state.lock:
            state.journal.append({"kind": "reset", "ts": time.time()})
            state.cumulative = 0.0
            state.threshold_fired = False

    def _write_status(self) -> None:
        if self._killed:
            return
        try:
            atomic_write_json(self.data_dir / "status.json", self.status())
        except OSError:
            pass
