import threading
import time

import pytest

from flowfabric.errors import FabricError
from flowfabric.protocol import iso
from flowfabric.triggers import DaemonKilled, TriggerDaemon, TriggerRule, rules_from_doc


class FakeServiceClient:
    """Captures start_run calls; serves canned completions for threshold rules."""

    def __init__(self):
        self.lock = threading.Lock()
        self.runs_by_key = {}
        self.calls = []
        self.completions = []  # list of (run_id, state_doc)
        self.fail_next = 0

    def start_run(self, flow_id, input_doc, run_key=None):
        with self.lock:
            if self.fail_next > 0:
                self.fail_next -= 1
                raise FabricError("injected start_run failure")
            if run_key and run_key in self.runs_by_key:
                return {"run_id": self.runs_by_key[run_key]}
            run_id = f"run-{len(self.calls):04d}"
            self.calls.append({"flow_id": flow_id, "input": input_doc, "run_key": run_key,
                               "run_id": run_id})
            if run_key:
                self.runs_by_key[run_key] = run_id
            return {"run_id": run_id}

    def list_runs(self, **filters):
        with self.lock:
            return {"runs": [{"run_id": rid, "started_at": iso(1000.0 + i), "status": "SUCCEEDED"}
                             for i, (rid, _doc) in enumerate(self.completions)]}

    def get_run(self, run_id):
        with self.lock:
            for rid, doc in self.completions:
                if rid == run_id:
                    return {"run_id": rid, "status": "SUCCEEDED", "state_doc": doc}
        raise FabricError(f"no run {run_id}")


def every_n_rule(watch_dir, n=1, rule_id="batcher", glob="*.raw"):
    return TriggerRule(rule_id=rule_id, kind="every_n_files", target_flow="flow-target",
                       watch_dir=str(watch_dir), glob=glob, n=n,
                       input_template={"files": "$.batch.files", "seq": "$.batch.seq",
                                       "source_dir": "$.batch.dir"})


def make_daemon(client, rules, tmp_path, **kw):
    return TriggerDaemon(client, rules, tmp_path / "daemon",
                         poll_interval_s=kw.pop("poll_interval_s", 0.03),
                         debounce_s=kw.pop("debounce_s", 0.05),
                         completion_poll_s=kw.pop("completion_poll_s", 0.03),
                         retry_delay_s=0.02, **kw)


def drop_files(watch_dir, count, start=0, size=64):
    watch_dir.mkdir(parents=True, exist_ok=True)
    for i in range(start, start + count):
        (watch_dir / f"f{i:05d}.raw").write_bytes(b"x" * size)


def wait_for(predicate, timeout=15.0, message="condition"):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return
        time.sleep(0.02)
    raise AssertionError(f"timed out: {message}")


class TestEveryN:
    def test_one_run_per_file(self, tmp_path):
        client = FakeServiceClient()
        watch = tmp_path / "watch"
        drop_files(watch, 3)
        daemon = make_daemon(client, [every_n_rule(watch, n=1)], tmp_path).start()
        try:
            wait_for(lambda: len(client.calls) == 3, message="3 runs fired")
            time.sleep(0.2)
            assert len(client.calls) == 3
        finally:
            daemon.stop()

    def test_floor_division_batching(self, tmp_path):
        client = FakeServiceClient()
        watch = tmp_path / "watch"
        drop_files(watch, 72)
        daemon = make_daemon(client, [every_n_rule(watch, n=8, rule_id="by8"),
                                      every_n_rule(watch, n=64, rule_id="by64")], tmp_path).start()
        try:
            wait_for(lambda: len(client.calls) == 9 + 1, message="10 runs")
            status = daemon.status()["rules"]
            assert status["by8"]["batches_fired"] == 9
            assert status["by8"]["pending"] == 0
            assert status["by64"]["batches_fired"] == 1
            assert status["by64"]["pending"] == 8
            assert status["by64"]["files_seen"] == 72
        finally:
            daemon.stop()

    def test_input_template_resolved_over_batch(self, tmp_path):
        client = FakeServiceClient()
        watch = tmp_path / "watch"
        drop_files(watch, 2)
        daemon = make_daemon(client, [every_n_rule(watch, n=2)], tmp_path).start()
        try:
            wait_for(lambda: len(client.calls) == 1, message="1 batch")
            call = client.calls[0]
            assert call["input"]["files"] == ["f00000.raw", "f00001.raw"]
            assert call["input"]["seq"] == 0
            assert call["input"]["source_dir"] == str(watch)
            assert call["run_key"] == "trigger:batcher:0"
        finally:
            daemon.stop()

    def test_file_never_counted_twice(self, tmp_path):
        client = FakeServiceClient()
        watch = tmp_path / "watch"
        drop_files(watch, 5)
        daemon = make_daemon(client, [every_n_rule(watch, n=1)], tmp_path).start()
        try:
            wait_for(lambda: len(client.calls) == 5, message="5 runs")
            # touch the same files again: same canonical paths, no re-count
            for f in watch.glob("*.raw"):
                f.touch()
            time.sleep(0.3)
            assert len(client.calls) == 5
            assert daemon.status()["rules"]["batcher"]["files_seen"] == 5
        finally:
            daemon.stop()

    def test_growing_file_debounced_until_stable(self, tmp_path):
        client = FakeServiceClient()
        watch = tmp_path / "watch"
        watch.mkdir()
        target = watch / "f00000.raw"
        target.write_bytes(b"")
        daemon = make_daemon(client, [every_n_rule(watch, n=1)], tmp_path,
                             debounce_s=0.15).start()
        try:
            for i in range(4):  # keep growing; must not fire while unstable
                target.write_bytes(b"x" * (i + 1) * 1024)
                time.sleep(0.05)
            assert len(client.calls) == 0
            wait_for(lambda: len(client.calls) == 1, message="fired after stability")
        finally:
            daemon.stop()

    def test_vanished_watch_dir_suspends_rule(self, tmp_path):
        client = FakeServiceClient()
        watch = tmp_path / "gone"
        daemon = make_daemon(client, [every_n_rule(watch, n=1)], tmp_path).start()
        try:
            wait_for(lambda: daemon.status()["rules"]["batcher"]["suspended"],
                     message="rule suspended")
            drop_files(watch, 1)
            wait_for(lambda: len(client.calls) == 1, message="resumed after dir appears")
        finally:
            daemon.stop()


class TestThreshold:
    def rule(self):
        return TriggerRule(rule_id="prime", kind="threshold_from_results",
                           target_flow="flow-prime", source_flow="flow-stills",
                           result_path="$.DialsStills.hits", min_total=1000,
                           input_template={"cumulative_hits": "$.threshold.cumulative"})

    def test_fires_once_cumulative_crosses_min(self, tmp_path):
        client = FakeServiceClient()
        daemon = make_daemon(client, [self.rule()], tmp_path).start()
        try:
            client.completions.append(("stills-1", {"DialsStills": {"hits": 400}}))
            client.completions.append(("stills-2", {"DialsStills": {"hits": 500}}))
            time.sleep(0.3)
            assert len(client.calls) == 0  # cum 900 < 1000
            client.completions.append(("stills-3", {"DialsStills": {"hits": 300}}))
            wait_for(lambda: len(client.calls) == 1, message="threshold fire")
            assert client.calls[0]["input"]["cumulative_hits"] == 1200
        finally:
            daemon.stop()

    def test_boundary_exactly_min_fires(self, tmp_path):
        client = FakeServiceClient()
        daemon = make_daemon(client, [self.rule()], tmp_path).start()
        try:
            client.completions.append(("stills-1", {"DialsStills": {"hits": 1000}}))
            wait_for(lambda: len(client.calls) == 1, message=">= not >")
        finally:
            daemon.stop()

    def test_converts_to_per_completion_after_first_fire(self, tmp_path):
        client = FakeServiceClient()
        daemon = make_daemon(client, [self.rule()], tmp_path).start()
        try:
            for i, hits in enumerate([400, 500, 300, 200, 100]):
                client.completions.append((f"stills-{i}", {"DialsStills": {"hits": hits}}))
                time.sleep(0.15)
            # cum crosses 1000 at the 3rd completion, then one fire per later completion
            wait_for(lambda: len(client.calls) == 3, message="1 threshold + 2 follow-ups")
        finally:
            daemon.stop()

    def test_missing_result_path_recorded_not_counted(self, tmp_path):
        client = FakeServiceClient()
        daemon = make_daemon(client, [self.rule()], tmp_path).start()
        try:
            client.completions.append(("stills-bad", {"Wrong": {"shape": 1}}))
            client.completions.append(("stills-good", {"DialsStills": {"hits": 1000}}))
            wait_for(lambda: len(client.calls) == 1, message="good completion fires")
            assert daemon.status()["rules"]["prime"]["cumulative"] == 1000
        finally:
            daemon.stop()

    def test_on_flow_completion_rule(self, tmp_path):
        rule = TriggerRule(rule_id="chain", kind="on_flow_completion",
                           target_flow="flow-next", source_flow="flow-prev",
                           input_template={"upstream": "$.completion.run_id"})
        client = FakeServiceClient()
        daemon = make_daemon(client, [rule], tmp_path).start()
        try:
            client.completions.append(("prev-1", {}))
            client.completions.append(("prev-2", {}))
            wait_for(lambda: len(client.calls) == 2, message="one run per completion")
            assert client.calls[0]["input"]["upstream"] == "prev-1"
        finally:
            daemon.stop()


class TestJournalReplay:
    def test_crash_one_file_short_of_batch(self, tmp_path):
        client = FakeServiceClient()
        watch = tmp_path / "watch"
        drop_files(watch, 7)  # 7 of 8
        daemon = make_daemon(client, [every_n_rule(watch, n=8)], tmp_path).start()
        try:
            wait_for(lambda: daemon.status()["rules"]["batcher"]["files_seen"] == 7,
                     message="7 files observed")
            assert len(client.calls) == 0
        finally:
            daemon.kill()

        drop_files(watch, 1, start=7)
        daemon2 = make_daemon(client, [every_n_rule(watch, n=8)], tmp_path).start()
        try:
            wait_for(lambda: len(client.calls) == 1, message="exactly one batch after restart")
            time.sleep(0.2)
            assert len(client.calls) == 1
            status = daemon2.status()["rules"]["batcher"]
            assert status["files_seen"] == 8
            assert status["pending"] == 0
        finally:
            daemon2.stop()

    def test_crash_between_start_run_and_ack_no_duplicate(self, tmp_path):
        client = FakeServiceClient()
        watch = tmp_path / "watch"
        drop_files(watch, 1)

        def fault(label):
            if label == "post_start_run":
                raise DaemonKilled(label)

        daemon = make_daemon(client, [every_n_rule(watch, n=1)], tmp_path, fault=fault)
        daemon.start()
        try:
            wait_for(lambda: len(client.calls) == 1, message="start_run issued")
        finally:
            daemon.kill()
        # intent journaled, ack missing; restart must re-issue idempotently
        daemon2 = make_daemon(client, [every_n_rule(watch, n=1)], tmp_path)
        status_before = daemon2.status()["rules"]["batcher"]
        assert status_before["batches_fired"] == 1
        assert status_before["acked"] == 0
        daemon2.start()
        try:
            wait_for(lambda: daemon2.status()["rules"]["batcher"]["acked"] == 1,
                     message="re-issue acked")
            assert len(client.calls) == 1  # run_key dedup swallowed the retry
        finally:
            daemon2.stop()

    def test_empty_journal_zero_counters(self, tmp_path):
        client = FakeServiceClient()
        watch = tmp_path / "watch"
        watch.mkdir()
        daemon = make_daemon(client, [every_n_rule(watch, n=4)], tmp_path)
        status = daemon.status()["rules"]["batcher"]
        assert status == {"kind": "every_n_files", "target_flow": "flow-target",
                          "files_seen": 0, "pending": 0, "batches_fired": 0, "acked": 0,
                          "dead": 0, "completions_seen": 0, "cumulative": 0.0,
                          "threshold_fired": False, "suspended": False}
        daemon.stop()

    def test_conservation_invariant_across_restarts(self, tmp_path):
        client = FakeServiceClient()
        watch = tmp_path / "watch"
        n = 5
        total = 0
        for round_i in range(4):
            drop_files(watch, 7, start=total)
            total += 7
            daemon = make_daemon(client, [every_n_rule(watch, n=n)], tmp_path).start()
            wait_for(lambda: daemon.status()["rules"]["batcher"]["files_seen"] == total,
                     message=f"round {round_i} files seen")
            wait_for(lambda: daemon.status()["rules"]["batcher"]["pending"] < n,
                     message=f"round {round_i} batches drained")
            status = daemon.status()["rules"]["batcher"]
            assert status["files_seen"] == status["batches_fired"] * n + status["pending"]
            daemon.kill()
        assert len(client.calls) == total // n
        assert len({c["run_key"] for c in client.calls}) == len(client.calls)

    def test_dead_letter_after_retry_exhaustion(self, tmp_path):
        client = FakeServiceClient()
        client.fail_next = 99
        watch = tmp_path / "watch"
        drop_files(watch, 1)
        daemon = make_daemon(client, [every_n_rule(watch, n=1)], tmp_path,
                             start_run_retries=2).start()
        try:
            wait_for(lambda: daemon.dead_letters(), message="dead letter recorded")
            letters = daemon.dead_letters()
            assert letters[0]["rule_id"] == "batcher"
            assert letters[0]["files"]
        finally:
            daemon.stop()


class TestConfigParsing:
    def test_rules_from_doc_roundtrip(self, tmp_path):
        doc = {"rules": [
            {"rule_id": "a", "kind": "every_n_files", "target_flow": "f1",
             "watch_dir": str(tmp_path), "glob": "*.h5", "n": 512},
            {"rule_id": "b", "kind": "threshold_from_results", "target_flow": "f2",
             "source_flow": "f1", "result_path": "$.X.hits", "min": 1000},
        ]}
        rules = rules_from_doc(doc)
        assert rules[0].n == 512
        assert rules[1].min_total == 1000

    def test_duplicate_rule_ids_rejected(self, tmp_path):
        doc = {"rules": [
            {"rule_id": "a", "kind": "on_flow_completion", "target_flow": "f", "source_flow": "s"},
            {"rule_id": "a", "kind": "on_flow_completion", "target_flow": "f", "source_flow": "s"},
        ]}
        with pytest.raises(FabricError):
            rules_from_doc(doc)

    def test_bad_rule_params_rejected(self, tmp_path):
        with pytest.raises(FabricError):
            TriggerRule(rule_id="x", kind="every_n_files", target_flow="f",
                        watch_dir=str(tmp_path), n=0)
        with pytest.raises(FabricError):
            TriggerRule(rule_id="x", kind="threshold_from_results", target_flow="f")
