"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v` (roughly ten minutes; the
backoff criterion alone sleeps through a real 63-second poll schedule).
"""
import json
import os
import random
import signal
import subprocess
import sys
import threading
import time
from pathlib import Path

import pytest

from flowfabric.auth import TokenStore
from flowfabric.client import wait_for_run
from flowfabric.compute import ComputeAgent, ComputeProvider
from flowfabric.conformance import ConformanceHarness
from flowfabric.deploy import Deployment, DeploymentConfig
from flowfabric.engine import BackoffPolicy, Engine, EngineKilled, RetryPolicy
from flowfabric.errors import FabricError
from flowfabric.fixtures import FIXTURE_NAMES, build_fixture, generate_data
from flowfabric.metrics import (concurrency_timeline, distribution_report,
                                select_median_run, summaries_by_flow, summarize_run)
from flowfabric.model import ActionState, FlowDefinition
from flowfabric.protocol import LocalTransport, ProviderDirectory
from flowfabric.review import ReviewProvider
from flowfabric.search import SearchProvider
from flowfabric.transfer import TransferAgentClient, TransferProvider, file_sha256
from flowfabric.triggers import DaemonKilled, TriggerDaemon, TriggerRule

from synth import xpcs_median_shaped

FAST_BACKOFF = BackoffPolicy(initial=0.05, factor=2.0, cap=0.4)
FAST_RETRY = RetryPolicy(delays=(0.05, 0.1, 0.2))


def report(name: str, ok: bool, detail: str = "") -> None:
    line = f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


def fast_deployment(tmp_path, **kw) -> Deployment:
    return Deployment(DeploymentConfig(
        data_dir=tmp_path, backoff=kw.pop("backoff", FAST_BACKOFF),
        retry=kw.pop("retry", FAST_RETRY), **kw))


# ---------------------------------------------------------------------------
# 1. Overhead accounting identity + published XPCS median row
# ---------------------------------------------------------------------------


def test_accounting_identity(tmp_path):
    deployment = fast_deployment(tmp_path / "acct")
    try:
        worst = 0.0
        for name in FIXTURE_NAMES:
            out = deployment.run_fixture(name, "tiny", timeout_s=180)
            s = out["summary"]
            assert s.status == "SUCCEEDED", f"{name} did not succeed"
            gap = abs(s.runtime_s - (s.provider_total_s + s.oh_s))
            worst = max(worst, gap)
            assert gap <= 1e-3, f"{name}: identity off by {gap}"
            # engine-reported totals equal the metrics recomputation exactly
            events = deployment.engine.runs.events(out["view"]["run_id"])
            final = events[-1]["detail"]
            assert final["totals"]["transfer_s"] == pytest.approx(s.transfer_s, abs=1e-9)
            assert final["totals"]["compute_s"] == pytest.approx(s.compute_s, abs=1e-9)
            assert final["oh_s"] == pytest.approx(s.oh_s, abs=1e-9)
    finally:
        deployment.stop()

    header, events = xpcs_median_shaped()
    s = summarize_run(header, events)
    assert abs(s.oh_s - 48.1) <= 0.1
    assert abs(s.oh_pct - 20.0) <= 0.1
    assert abs(s.runtime_s - (s.provider_total_s + s.oh_s)) <= 1e-3
    report("overhead-accounting", True,
           f"7 fixtures exact to {worst:.2e}s; synthetic median row OH={s.oh_s:.1f}s %OH={s.oh_pct:.1f}")


# ---------------------------------------------------------------------------
# 2. Backoff model: analytic sequence + measured detection lag
# ---------------------------------------------------------------------------


def test_backoff_model(tmp_path, tokens):
    default = BackoffPolicy()
    assert default.next_poll_interval(0) == 1.0
    assert default.next_poll_interval(3) == 8.0
    assert default.next_poll_interval(12) == 600.0
    assert [default.next_poll_interval(k) for k in range(5)] == [1, 2, 4, 8, 16]

    # interval pattern observed on a scaled long action: doubling, then flat at cap
    scaled = BackoffPolicy(initial=0.02, factor=2.0, cap=0.4)
    directory = ProviderDirectory()
    agent = ComputeAgent(tmp_path / "agent", max_parallel=4)
    compute = ComputeProvider(tokens)
    compute.register_endpoint(agent, "local://a", 4, endpoint_id="ep")
    directory.bind_local("compute", compute)
    engine = Engine(tmp_path / "svc", directory, tokens, backoff=scaled, retry=FAST_RETRY).start()
    ctx = tokens.check(tokens.mint_token("alice", ["*"]).secret, None)

    def one_run(duration):
        fn = compute.register_function({"name": f"sleep-{duration}", "kind": "builtin-stub",
                                        "payload": {"stub": "sleep", "duration_s": duration}})
        flow = FlowDefinition(title=f"lag-{duration}", start_at="S", states={
            "S": ActionState("local://compute", "compute",
                             {"endpoint_id": "ep", "function_id": fn}, "$.S", end=True)})
        flow_id = engine.deploy_flow(ctx, flow.to_doc())["flow_id"]
        run = engine.start_run(ctx, flow_id, {})
        deadline = time.monotonic() + duration + 120
        while engine.get_run(ctx, run["run_id"])["status"] == "ACTIVE":
            assert time.monotonic() < deadline
            time.sleep(0.02)
        return engine.get_events(ctx, run["run_id"])

    try:
        events = one_run(2.5)
        polls = [e["mono"] for e in events if e["kind"] == "ActionPolled"]
        submit = next(e["mono"] for e in events if e["kind"] == "ActionSubmitted")
        gaps = [b - a for a, b in zip([submit] + polls, polls)]
        expected = [scaled.next_poll_interval(k) for k in range(len(gaps))]
        for got, want in zip(gaps, expected):
            assert abs(got - want) < 0.05 + 0.25 * want, f"poll gap {got} != {want}"
        assert gaps[-1] == pytest.approx(scaled.cap, abs=0.1)  # saturated at the cap
    finally:
        engine.stop()
        agent.stop()

    # measured detection lag at the default 1 s / x2 policy
    directory2 = ProviderDirectory()
    agent2 = ComputeAgent(tmp_path / "agent2", max_parallel=4)
    compute2 = ComputeProvider(tokens)
    compute2.register_endpoint(agent2, "local://a2", 4, endpoint_id="ep")
    directory2.bind_local("compute", compute2)
    engine2 = Engine(tmp_path / "svc2", directory2, tokens, backoff=BackoffPolicy(),
                     retry=RetryPolicy()).start()
    lags = {}
    try:
        for duration in (0.5, 5.0, 50.0):
            fn = compute2.register_function({"name": f"lagstub-{duration}", "kind": "builtin-stub",
                                             "payload": {"stub": "sleep", "duration_s": duration}})
            flow = FlowDefinition(title=f"lagrt-{duration}", start_at="S", states={
                "S": ActionState("local://compute", "compute",
                                 {"endpoint_id": "ep", "function_id": fn}, "$.S", end=True)})
            flow_id = engine2.deploy_flow(ctx, flow.to_doc())["flow_id"]
            run = engine2.start_run(ctx, flow_id, {})
            deadline = time.monotonic() + duration + 120
            while engine2.get_run(ctx, run["run_id"])["status"] == "ACTIVE":
                assert time.monotonic() < deadline, f"run for T={duration} hung"
                time.sleep(0.05)
            events = engine2.get_events(ctx, run["run_id"])
            submit = next(e["mono"] for e in events if e["kind"] == "ActionSubmitted")
            done_poll = max(e["mono"] for e in events if e["kind"] == "ActionPolled")
            measured = done_poll - submit - duration
            analytic = BackoffPolicy().detection_lag(duration)
            assert abs(measured - analytic) <= 0.25, \
                f"T={duration}: measured lag {measured:.3f} vs analytic {analytic:.3f}"
            lags[duration] = (measured, analytic)
    finally:
        engine2.stop()
        agent2.stop()
    detail = ", ".join(f"T={d}: {m:.2f}s vs {a:.2f}s" for d, (m, a) in lags.items())
    report("backoff-model", True, detail)


# ---------------------------------------------------------------------------
# 3. Concurrency: 40 simultaneous 10-step runs, solo-identical logs, peak 40
# ---------------------------------------------------------------------------


def test_concurrency_forty_runs(tmp_path):
    deployment = fast_deployment(tmp_path / "conc", backoff=BackoffPolicy(),
                                 retry=RetryPolicy(), workers=16, max_parallel=64)
    try:
        fixture = build_fixture("XPCS", deployment.provider_urls, "tiny")
        for fn in fixture.functions:
            deployment.compute.register_function(fn)
        flow_id = deployment.client.deploy_flow(fixture.flow.to_doc())["flow_id"]

        def structure(run_id):
            events = deployment.client.get_events(run_id)
            return [(e["kind"], e["step"]) for e in events]

        # reference solo run
        generate_data("XPCS", "tiny", deployment.instrument_root / "solo", seed=99)
        solo = deployment.client.start_run(flow_id, deployment.fixture_input("solo"))
        solo_view = wait_for_run(deployment.client, solo["run_id"], timeout_s=180)
        assert solo_view["status"] == "SUCCEEDED"
        solo_structure = structure(solo["run_id"])
        assert len([1 for k, _ in solo_structure if k == "StepCompleted"]) == 10

        for i in range(40):
            generate_data("XPCS", "tiny", deployment.instrument_root / f"conc{i:02d}", seed=i)
        run_ids = []
        for i in range(40):
            run = deployment.client.start_run(
                flow_id, deployment.fixture_input(f"conc{i:02d}"), run_key=f"conc-{i}")
            run_ids.append(run["run_id"])
        assert len(set(run_ids)) == 40

        views = [wait_for_run(deployment.client, rid, timeout_s=280) for rid in run_ids]
        assert all(v["status"] == "SUCCEEDED" for v in views)

        mismatched = [rid for rid in run_ids if structure(rid) != solo_structure]
        assert mismatched == [], f"{len(mismatched)} runs diverged from the solo structure"

        intervals = []
        for rid in run_ids:
            header = deployment.engine.runs.header(rid)
            events = deployment.engine.runs.events(rid)
            intervals.append((header["started_at"], events[-1]["wall"]))
        peak = max(n for _t, n in concurrency_timeline(intervals, 1.0))
        assert peak == 40, f"peak concurrency {peak} != 40"
        report("concurrency-40", True, f"40/40 SUCCEEDED, logs solo-identical, peak={peak}")
    finally:
        deployment.stop()


# ---------------------------------------------------------------------------
# 4. Trigger arithmetic: 4608 files -> 9 Stills + 1 Publish; Prime threshold
# ---------------------------------------------------------------------------


def test_trigger_arithmetic(tmp_path):
    deployment = fast_deployment(tmp_path / "trig", max_parallel=16, workers=12)
    try:
        watch = deployment.instrument_root / "acquisition"
        watch.mkdir()
        stills = build_fixture("SSX-Stills", deployment.provider_urls, "tiny")
        publish = build_fixture("SSX-Publish", deployment.provider_urls, "tiny")
        prime = build_fixture("SSX-Prime", deployment.provider_urls, "tiny")
        for fixture in (stills, publish, prime):
            for fn in fixture.functions:
                deployment.compute.register_function(fn)
        stills_id = deployment.client.deploy_flow(stills.flow.to_doc())["flow_id"]
        publish_id = deployment.client.deploy_flow(publish.flow.to_doc())["flow_id"]
        prime_id = deployment.client.deploy_flow(prime.flow.to_doc())["flow_id"]

        base = deployment.fixture_input("acquisition")
        stills_template = {**base, "transfer_source_path": "$.batch.first_rel",
                           "transfer_destination_path": "staging/stills",
                           "batch_scope": "$.batch.first",
                           "hits_per_batch": 400, "dataset_subject": "trigger/stills"}
        publish_template = {**base, "dataset_subject": "trigger/publish",
                            "batch_scope": "$.batch.seq"}
        prime_template = {k: base[k] for k in
                          ("compute_endpoint_id", "transfer_source_collection_id",
                           "transfer_destination_collection_id", "staging_root")}
        prime_template["cumulative_hits"] = "$.threshold.cumulative"
        prime_template["batch_scope"] = "$.completion.run_id"

        rules = [
            TriggerRule(rule_id="stills", kind="every_n_files", target_flow=stills_id,
                        watch_dir=str(watch), glob="*.raw", n=512,
                        rel_base=str(deployment.instrument_root),
                        input_template=stills_template),
            TriggerRule(rule_id="publish", kind="every_n_files", target_flow=publish_id,
                        watch_dir=str(watch), glob="*.raw", n=4096,
                        rel_base=str(deployment.instrument_root),
                        input_template=publish_template),
            TriggerRule(rule_id="prime", kind="threshold_from_results", target_flow=prime_id,
                        source_flow=stills_id, result_path="$.DialsStills.hits", min_total=1000,
                        input_template=prime_template),
        ]
        daemon = TriggerDaemon(deployment.client, rules, tmp_path / "trig-daemon",
                               poll_interval_s=0.1, debounce_s=0.1, completion_poll_s=0.1,
                               retry_delay_s=0.1)
        daemon.start()
        try:
            for i in range(4608):
                (watch / f"img_{i:05d}.raw").write_bytes(b"frame" + i.to_bytes(4, "big"))

            def rule_status(rid):
                return daemon.status()["rules"][rid]

            deadline = time.monotonic() + 240
            while time.monotonic() < deadline:
                if (rule_status("stills")["acked"] == 9 and rule_status("publish")["acked"] == 1):
                    break
                time.sleep(0.25)
            assert rule_status("stills")["acked"] == 9, rule_status("stills")
            assert rule_status("publish")["acked"] == 1, rule_status("publish")
            assert rule_status("publish")["pending"] == 512
            assert rule_status("stills")["files_seen"] == 4608

            # all 9 stills runs complete; prime fires once at >=1000 then per完成 completion
            deadline = time.monotonic() + 240
            while time.monotonic() < deadline:
                done = deployment.client.list_runs(flow_id=stills_id, status="SUCCEEDED",
                                                   limit=100)["runs"]
                if len(done) == 9 and rule_status("prime")["acked"] == 7:
                    break
                time.sleep(0.25)
            stills_done = deployment.client.list_runs(flow_id=stills_id, status="SUCCEEDED",
                                                      limit=100)["runs"]
            assert len(stills_done) == 9
            prime_status = rule_status("prime")
            assert prime_status["acked"] == 7, prime_status  # 1 threshold + 6 follow-ups
            assert prime_status["threshold_fired"] is True
            # first fire happened at cumulative 1200 (third completion of 400 hits each)
            first_fire = next(rec for rec in
                              __import__("flowfabric.storage", fromlist=["read_ndjson"]).read_ndjson(
                                  tmp_path / "trig-daemon" / "prime.journal")
                              if rec.get("kind") == "intent")
            assert first_fire["context"]["threshold"]["cumulative"] == 1200
            prime_runs = deployment.client.list_runs(flow_id=prime_id, limit=100)["runs"]
            assert len(prime_runs) == 7
            report("trigger-arithmetic", True,
                   "4608 files -> 9 stills + 1 publish (512 pending); prime: 1@cum1200 + 6")
        finally:
            daemon.stop()
    finally:
        deployment.stop()


# ---------------------------------------------------------------------------
# 5. Sustained cadence: accelerated one-file-per-minute feed
# ---------------------------------------------------------------------------


def test_sustained_cadence(tmp_path):
    # time scale: 1 simulated minute = 2.4 s real (25x). Default backoff and
    # small-scale stub durations shrink by the same factor.
    ts = 1.0 / 25.0
    deployment = Deployment(DeploymentConfig(
        data_dir=tmp_path / "cad", time_scale=ts, workers=16, max_parallel=32))
    sim_minute = 60.0 * ts
    n_files = 30
    try:
        fixture = build_fixture("XPCS", deployment.provider_urls, "small")
        # compress stub durations onto the same simulated clock and point the
        # flow at the rescaled function ids
        from flowfabric.compute import function_from_doc

        id_map = {}
        for fn in fixture.functions:
            scaled = json.loads(json.dumps(fn))
            scaled["payload"]["duration_s"] = scaled["payload"]["duration_s"] * 60.0 * ts
            deployment.compute.register_function(scaled)
            id_map[function_from_doc(fn).function_id] = function_from_doc(scaled).function_id
        text = json.dumps(fixture.flow.to_doc())
        for old, new in id_map.items():
            text = text.replace(old, new)
        flow_id = deployment.client.deploy_flow(json.loads(text))["flow_id"]

        watch = deployment.instrument_root / "feed"
        watch.mkdir()
        template = deployment.fixture_input("feed")
        template["transfer_source_path"] = "$.batch.first_rel"
        template["batch_scope"] = "$.batch.first"
        rule = TriggerRule(rule_id="cadence", kind="every_n_files", target_flow=flow_id,
                           watch_dir=str(watch), glob="*.raw", n=1,
                           rel_base=str(deployment.instrument_root), input_template=template)
        daemon = TriggerDaemon(deployment.client, [rule], tmp_path / "cad-daemon",
                               poll_interval_s=0.1, debounce_s=0.1, completion_poll_s=0.2)
        daemon.start()
        try:
            for i in range(n_files):
                (watch / f"frame_{i:04d}.raw").write_bytes(os.urandom(64 * 1024))
                time.sleep(sim_minute)
            deadline = time.monotonic() + 120
            while time.monotonic() < deadline:
                page = deployment.client.list_runs(flow_id=flow_id, limit=100)["runs"]
                if len(page) == n_files and all(r["status"] != "ACTIVE" for r in page):
                    break
                time.sleep(0.5)
            runs = deployment.client.list_runs(flow_id=flow_id, limit=100)["runs"]
            assert len(runs) == n_files, f"{len(runs)} runs fired for {n_files} files"
            assert all(r["status"] == "SUCCEEDED" for r in runs)
            status = daemon.status()["rules"]["cadence"]
            assert status["batches_fired"] == n_files  # none missed, none duplicated
            assert status["files_seen"] == n_files

            intervals, durations = [], []
            for r in runs:
                header = deployment.engine.runs.header(r["run_id"])
                events = deployment.engine.runs.events(r["run_id"])
                intervals.append((header["started_at"], events[-1]["wall"]))
                durations.append(events[-1]["wall"] - header["started_at"])
            mean_d = sum(durations) / len(durations)
            analytic = mean_d / sim_minute
            series = concurrency_timeline(intervals, sim_minute)
            counts = [n for _t, n in series]
            ramp = max(1, int(analytic) + 1)
            steady = counts[ramp:len(counts) - ramp]
            assert steady, "no steady-state window"
            lo, hi = min(steady), max(steady)
            assert analytic - 2 <= lo and hi <= analytic + 2, \
                f"steady-state {lo}..{hi} outside {analytic:.1f} +/- 2"
            report("sustained-cadence", True,
                   f"{n_files} runs, steady {lo}..{hi} vs analytic {analytic:.1f}")
        finally:
            daemon.stop()
    finally:
        deployment.stop()


# ---------------------------------------------------------------------------
# 6. Protocol conformance: >=1000 fuzzed sequences per provider
# ---------------------------------------------------------------------------


def test_protocol_conformance(tmp_path):
    deployment = fast_deployment(tmp_path / "conf", max_parallel=16)
    try:
        generate_data("BraggNN", "tiny", deployment.instrument_root / "confdata", seed=3)
        sleep_fn = deployment.compute.register_function(
            {"name": "conf_sleep", "kind": "builtin-stub",
             "payload": {"stub": "sleep", "duration_s": 0.002}})

        factories = {
            "transfer": lambda rng, i: {
                "source_collection": deployment.instrument_collection,
                "destination_collection": deployment.cluster_collection,
                "source_path": "confdata/img_00000.raw",
                "destination_path": f"confout/{i}-{rng.randint(0, 1 << 30)}.bin",
                "recursive": False},
            "compute": lambda rng, i: {"endpoint_id": deployment.endpoint_id,
                                       "function_id": sleep_fn, "args": {"i": i}},
            "search": lambda rng, i: {"index_id": deployment.index_id,
                                      "subject": f"conf/{i}", "content": {"i": i}},
            "review": lambda rng, i: {"prompt": f"conf {i}", "reviewers": ["operator"]},
        }

        def poker(action_id, rng):
            try:
                deployment.review.respond(deployment.admin_token, action_id,
                                          "approve" if rng.random() < 0.5 else "reject")
            except FabricError:
                pass

        stats = []
        for kind in ("transfer", "compute", "search", "review"):
            harness = ConformanceHarness(
                transport=LocalTransport(getattr(deployment, kind)),
                token=deployment.admin_token,
                body_factory=factories[kind],
                poker=poker if kind == "review" else None)
            result = harness.run_sequences(1000, seed=0xACCE97 + hash(kind) % 1000)
            assert result.ok, f"{kind}: {result.violations[:5]}"
            assert result.sequences == 1000
            stats.append(f"{kind}:{result.ops}ops")
        report("protocol-conformance", True, "1000 sequences each; " + ", ".join(stats))
    finally:
        deployment.stop()


# ---------------------------------------------------------------------------
# 7. Crash safety: 50 randomized kill/restart trials
# ---------------------------------------------------------------------------


ENGINE_FAULT_LABELS = ["pre_submit", "post_submit", "post_submit_logged",
                       "pre_complete", "post_complete", "pre_release"]
DAEMON_FAULT_LABELS = ["pre_file_journal", "post_file_journal", "pre_intent",
                       "post_intent", "pre_start_run", "post_start_run"]


def _engine_crash_trial(tmp_path, tokens, rng, trial):
    directory = ProviderDirectory()
    agent = ComputeAgent(tmp_path / f"agent{trial}", max_parallel=8)
    compute = ComputeProvider(tokens)
    compute.register_endpoint(agent, "local://a", 8, endpoint_id="ep")
    directory.bind_local("compute", compute)
    counter = tmp_path / f"counter{trial}.ndjson"
    fn = compute.register_function({"name": "crash_counter", "kind": "builtin-stub",
                                    "payload": {"stub": "counter"}})

    def state(name, nxt=None, end=False):
        return ActionState("local://compute", "compute",
                           {"endpoint_id": "ep", "function_id": fn,
                            "args": {"counter_path": str(counter), "label": name}},
                           f"$.{name}", next=nxt, end=end)

    flow = FlowDefinition(title="crashy", start_at="A", states={
        "A": state("A", "B"), "B": state("B", "C"), "C": state("C", end=True)})

    label = rng.choice(ENGINE_FAULT_LABELS)
    hits = rng.randint(1, 6)
    state_box = {"n": 0}

    def fault(point):
        if point == label:
            state_box["n"] += 1
            if state_box["n"] == hits:
                raise EngineKilled(point)

    data = tmp_path / f"svc{trial}"
    engine = Engine(data, directory, tokens, backoff=FAST_BACKOFF,
                    retry=FAST_RETRY, workers=4, fault=fault)
    engine.start()
    ctx = tokens.check(tokens.mint_token("alice", ["*"]).secret, None)
    flow_id = engine.deploy_flow(ctx, flow.to_doc())["flow_id"]
    run = engine.start_run(ctx, flow_id, {}, run_key=f"crash-{trial}")
    run_id = run["run_id"]
    time.sleep(rng.uniform(0.05, 0.5))
    engine.kill()

    engine2 = Engine(data, directory, tokens, backoff=FAST_BACKOFF,
                     retry=FAST_RETRY, workers=4)
    engine2.start()
    try:
        deadline = time.monotonic() + 30
        while time.monotonic() < deadline:
            view = engine2.get_run(ctx, run_id)
            if view["status"] != "ACTIVE":
                break
            time.sleep(0.02)
        assert view["status"] == "SUCCEEDED", f"trial {trial}: {view['status']}"
        executed = counter.read_text().strip().splitlines()
        assert len(executed) == 3, f"trial {trial}: {len(executed)} executions for 3 steps"
        completed = [e["step"] for e in engine2.get_events(ctx, run_id) if e["kind"] == "StepCompleted"]
        assert completed == ["A", "B", "C"]
        seqs = [e["seq"] for e in engine2.get_events(ctx, run_id)]
        assert seqs == list(range(1, len(seqs) + 1)), "seq gap after crash"
    finally:
        engine2.stop()
        agent.stop()


def _spawn_agent_subprocess(root, credentials, port):
    proc = subprocess.Popen(
        [sys.executable, "-m", "flowfabric.cli", "endpoint", "transfer", "start",
         "--root", str(root), "--credentials", str(credentials), "--port", str(port)],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT)
    return proc


def _wait_port(url, token, timeout=15.0):
    client = TransferAgentClient(url, token=token, timeout_s=2.0)
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            client.stat("/", ".")
            return client
        except FabricError as exc:
            if exc.code in ("AgentUnreachable", "ProviderUnreachable"):
                time.sleep(0.1)
                continue
            return client  # any structured answer means the server is up
    raise AssertionError("agent subprocess never came up")


def _transfer_crash_trials(tmp_path, tokens, rng, trials):
    import socket

    src_root = tmp_path / "xsrc"
    dst_root = tmp_path / "xdst"
    src_root.mkdir(parents=True)
    dst_root.mkdir(parents=True)
    credentials = tmp_path / "creds.json"
    store = TokenStore(credentials)
    store.ensure_principal("fabric-service", kind="service")
    agent_token = store.mint_token("fabric-service", ["transfer:agent"]).secret
    tokens.ensure_principal("fabric-service", kind="service")

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    url = f"http://127.0.0.1:{port}"

    proc = _spawn_agent_subprocess(dst_root, credentials, port)
    try:
        _wait_port(url, agent_token)
        src_agent_local = __import__("flowfabric.transfer", fromlist=["TransferAgent"]).TransferAgent(
            [src_root], chunk_size=64 * 1024)
        provider = TransferProvider(tokens, poll_s=0.01,
                                    retry_delays=(0.2, 0.5, 1.0, 2.0, 4.0, 8.0))

        # the destination subprocess pulls from this process over HTTP: give
        # the source agent an HTTP face too
        from flowfabric.httpd import AppServer
        from flowfabric.webapps import transfer_agent_app

        src_http = AppServer(transfer_agent_app(src_agent_local, store)).start()
        dst_client = TransferAgentClient(url, token=agent_token, timeout_s=5.0)
        src_id = provider.register_collection(src_agent_local, src_http.url, str(src_root), "src")
        dst_id = provider.register_collection(dst_client, url, str(dst_root), "dst")
        transport = LocalTransport(provider)
        admin = tokens.mint_token("alice", ["*"]).secret

        for trial in range(trials):
            size = rng.randint(256 * 1024, 2 * 1024 * 1024)
            name = f"t{trial}.bin"
            blob = os.urandom(size)
            (src_root / name).write_bytes(blob)
            wire = transport.run(admin, f"crash-tr-{trial}", {
                "source_collection": src_id, "destination_collection": dst_id,
                "source_path": name, "destination_path": f"out/{name}", "recursive": False})
            time.sleep(rng.uniform(0.01, 0.3))
            proc.kill()
            proc.wait()
            time.sleep(rng.uniform(0.0, 0.2))
            proc = _spawn_agent_subprocess(dst_root, credentials, port)
            _wait_port(url, agent_token)
            deadline = time.monotonic() + 60
            while time.monotonic() < deadline:
                out = transport.status(admin, wire["action_id"])
                if out["status"] != "ACTIVE":
                    break
                time.sleep(0.05)
            assert out["status"] == "SUCCEEDED", f"transfer trial {trial}: {out}"
            assert file_sha256(dst_root / "out" / name) == file_sha256(src_root / name), \
                f"transfer trial {trial}: digest mismatch after agent kill"
        src_http.stop()
    finally:
        proc.kill()
        proc.wait()


def _daemon_crash_trial(tmp_path, rng, trial):
    from test_triggers import FakeServiceClient, every_n_rule  # reuse the harness

    client = FakeServiceClient()
    watch = tmp_path / f"dwatch{trial}"
    watch.mkdir(parents=True)
    n = 10
    total_files = 60
    dropped = 0
    data_dir = tmp_path / f"ddaemon{trial}"

    label = rng.choice(DAEMON_FAULT_LABELS)
    hits = rng.randint(1, 8)
    box = {"n": 0}

    def fault(point):
        if point == label:
            box["n"] += 1
            if box["n"] == hits:
                raise DaemonKilled(point)

    daemon = TriggerDaemon(client, [every_n_rule(watch, n=n)], data_dir,
                           poll_interval_s=0.03, debounce_s=0.04, retry_delay_s=0.02,
                           fault=fault)
    daemon.start()
    while dropped < total_files // 2:
        (watch / f"f{dropped:05d}.raw").write_bytes(b"x" * 16)
        dropped += 1
        if rng.random() < 0.1:
            time.sleep(0.02)
    time.sleep(rng.uniform(0.05, 0.4))
    daemon.kill()

    daemon2 = TriggerDaemon(client, [every_n_rule(watch, n=n)], data_dir,
                            poll_interval_s=0.03, debounce_s=0.04, retry_delay_s=0.02)
    daemon2.start()
    try:
        while dropped < total_files:
            (watch / f"f{dropped:05d}.raw").write_bytes(b"x" * 16)
            dropped += 1
        deadline = time.monotonic() + 30
        expected = total_files // n
        while time.monotonic() < deadline:
            status = daemon2.status()["rules"]["batcher"]
            if status["acked"] == expected and status["files_seen"] == total_files:
                break
            time.sleep(0.05)
        status = daemon2.status()["rules"]["batcher"]
        assert status["files_seen"] == total_files, f"daemon trial {trial}: {status}"
        assert status["acked"] == expected, f"daemon trial {trial}: {status}"
        assert status["dead"] == 0
        assert len(client.calls) == expected, \
            f"daemon trial {trial}: {len(client.calls)} runs for {expected} batches"
        assert len({c["run_key"] for c in client.calls}) == expected
        assert status["files_seen"] == status["batches_fired"] * n + status["pending"]
    finally:
        daemon2.stop()


def test_crash_safety_fifty_trials(tmp_path, tokens):
    rng = random.Random(0xC4A54)
    for trial in range(20):
        _engine_crash_trial(tmp_path / "eng", tokens, rng, trial)
    _transfer_crash_trials(tmp_path / "xfer", tokens, rng, trials=15)
    for trial in range(15):
        _daemon_crash_trial(tmp_path / "daem", rng, trial)
    report("crash-safety", True, "20 engine + 15 transfer-agent (SIGKILL) + 15 daemon trials")


# ---------------------------------------------------------------------------
# 8. Transfer integrity fuzz: 200 cases over 0..32 MiB + cancel cleanliness
# ---------------------------------------------------------------------------


def test_transfer_integrity_fuzz(tmp_path, tokens):
    from flowfabric.transfer import TransferAgent

    rng = random.Random(0x7AF5)
    src_root = tmp_path / "fsrc"
    dst_root = tmp_path / "fdst"
    src_root.mkdir()
    dst_root.mkdir()
    peers = {}
    src_agent = TransferAgent([src_root], peer_resolver=peers.get, chunk_size=256 * 1024)
    dst_agent = TransferAgent([dst_root], peer_resolver=peers.get, chunk_size=256 * 1024)
    peers["local://fsrc"] = src_agent
    peers["local://fdst"] = dst_agent
    provider = TransferProvider(tokens, poll_s=0.005, retry_delays=(0.05, 0.1, 0.2))
    src_id = provider.register_collection(src_agent, "local://fsrc", str(src_root), "src")
    dst_id = provider.register_collection(dst_agent, "local://fdst", str(dst_root), "dst")
    transport = LocalTransport(provider)
    admin = tokens.mint_token("alice", ["*"]).secret

    sizes = [0, 1, 2, 255, 256 * 1024 - 1, 256 * 1024, 256 * 1024 + 1, 1 << 20, 32 << 20]
    while len(sizes) < 200:
        sizes.append(int(2 ** rng.uniform(0, 24.99)))  # log-uniform 1 B .. ~32 MiB
    rng.shuffle(sizes)

    digests = {}
    for i, size in enumerate(sizes):
        blob = os.urandom(size)
        (src_root / f"fz{i:03d}.bin").write_bytes(blob)
        import hashlib

        digests[i] = hashlib.sha256(blob).hexdigest()

    wave = 16
    completed = 0
    for start in range(0, len(sizes), wave):
        wires = {}
        for i in range(start, min(start + wave, len(sizes))):
            wires[i] = transport.run(admin, f"fuzz-{i}", {
                "source_collection": src_id, "destination_collection": dst_id,
                "source_path": f"fz{i:03d}.bin", "destination_path": f"out/fz{i:03d}.bin",
                "recursive": False})
        for i, wire in wires.items():
            deadline = time.monotonic() + 120
            while time.monotonic() < deadline:
                out = transport.status(admin, wire["action_id"])
                if out["status"] != "ACTIVE":
                    break
                time.sleep(0.01)
            assert out["status"] == "SUCCEEDED", f"case {i} (size {sizes[i]}): {out}"
            assert out["details"]["bytes_moved"] == sizes[i]
            assert file_sha256(dst_root / "out" / f"fz{i:03d}.bin") == digests[i], \
                f"case {i}: digest mismatch at size {sizes[i]}"
            completed += 1

    # canceled transfers leave nothing visible
    canceled_clean = 0
    for j in range(8):
        size = 4 << 20
        (src_root / f"cz{j}.bin").write_bytes(os.urandom(size))

        class SlowPeer:
            def __init__(self, inner):
                self._inner = inner

            def __getattr__(self, name):
                return getattr(self._inner, name)

            def read_chunk(self, *a, **kw):
                time.sleep(0.05)
                return self._inner.read_chunk(*a, **kw)

        peers["local://fsrc"] = SlowPeer(src_agent)
        wire = transport.run(admin, f"cancel-{j}", {
            "source_collection": src_id, "destination_collection": dst_id,
            "source_path": f"cz{j}.bin", "destination_path": f"cout/cz{j}.bin",
            "recursive": False})
        time.sleep(random.uniform(0.02, 0.15))
        transport.cancel(admin, wire["action_id"])
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline and list(dst_root.glob(".ff-partial/*.part")):
            time.sleep(0.02)
        assert not (dst_root / "cout" / f"cz{j}.bin").exists()
        assert not list(dst_root.glob(".ff-partial/*.part"))
        canceled_clean += 1
        peers["local://fsrc"] = src_agent

    report("transfer-integrity", True,
           f"{completed}/200 digests equal; {canceled_clean} canceled transfers left no partials")


# ---------------------------------------------------------------------------
# 9. Fixture coverage: the seven flows at tiny scale + distribution report
# ---------------------------------------------------------------------------


def test_fixture_coverage(tmp_path):
    deployment = fast_deployment(tmp_path / "cover", max_parallel=16, workers=12)
    expected_steps = {"XPCS": 10, "SSX-Stills": 10, "SSX-Prime": 2, "SSX-Publish": 6,
                      "Ptycho": 3, "BraggNN": 4, "HEDM": 8}
    try:
        t0 = time.monotonic()
        summaries = {}
        for name in FIXTURE_NAMES:
            out = deployment.run_fixture(name, "tiny", timeout_s=180)
            assert out["view"]["status"] == "SUCCEEDED", f"{name} failed"
            assert len(out["summary"].steps) == expected_steps[name], \
                f"{name}: {len(out['summary'].steps)} steps"
            summaries.setdefault(name, []).append(out["summary"])
        # a few extra runs so at least one flow gets real quartiles
        for seed in (1, 2, 3):
            out = deployment.run_fixture("Ptycho", "tiny", seed=seed, timeout_s=180)
            summaries["Ptycho"].append(out["summary"])
        elapsed = time.monotonic() - t0
        assert elapsed < 300, f"tiny sweep took {elapsed:.0f}s"

        report_doc = distribution_report(
            {flow: [s.runtime_s for s in group] for flow, group in summaries.items()})
        assert set(report_doc) == set(FIXTURE_NAMES)
        assert {"q1", "median", "q3", "whisker_lo", "whisker_hi"} <= set(report_doc["Ptycho"])
        assert report_doc["Ptycho"]["n"] == 4
        report("fixture-coverage", True,
               f"7/7 fixtures SUCCEEDED in {elapsed:.0f}s; quartile table emitted")
    finally:
        deployment.stop()


# ---------------------------------------------------------------------------
# SECONDARY: UI end-to-end contract (the SPA's exact routes and behaviors)
# ---------------------------------------------------------------------------


def test_secondary_ui_contract(tmp_path, tokens):
    import requests

    from flowfabric.fixtures import build_review_variant
    from flowfabric.client import HttpServiceClient

    dist = Path(__file__).resolve().parents[1] / "frontend" / "dist"
    config = DeploymentConfig(
        data_dir=tmp_path / "ui", mode="serve",
        backoff=FAST_BACKOFF, retry=FAST_RETRY,
        ui_dist=dist if (dist / "index.html").is_file() else None)
    deployment = Deployment(config)
    http = HttpServiceClient(deployment.base_url, deployment.admin_token)
    headers = {"Authorization": f"Bearer {deployment.admin_token}"}
    try:
        # run list reflects a completing fixture on the next poll of GET /runs
        out = deployment.run_fixture("BraggNN", "tiny", timeout_s=120)
        page = http.list_runs(limit=10)
        row = next(r for r in page["runs"] if r["run_id"] == out["view"]["run_id"])
        assert row["status"] == "SUCCEEDED"

        # the review flow parks INACTIVE; approve through the inbox resumes to publish
        flow, fns = build_review_variant(deployment.provider_urls, "tiny")
        for fn in fns:
            deployment.compute.register_function(fn)
        flow_id = http.deploy_flow(flow.to_doc())["flow_id"]
        results = {}
        for verdict in ("approve", "reject"):
            batch = f"uibatch-{verdict}"
            generate_data("XPCS", "tiny", deployment.instrument_root / batch, seed=7)
            run = http.start_run(flow_id, deployment.fixture_input(
                batch, extra={"reviewers": ["operator"]}))
            deadline = time.monotonic() + 60
            pending = []
            while time.monotonic() < deadline and not pending:
                pending = requests.get(f"{deployment.base_url}/providers/review/inbox",
                                       headers=headers, timeout=10).json()["pending"]
                time.sleep(0.05)
            assert pending, "review request never reached the inbox"
            assert http.get_run(run["run_id"])["status"] == "ACTIVE"  # paused, not failed
            resp = requests.post(
                f"{deployment.base_url}/providers/review/respond/{pending[0]['action_id']}",
                json={"decision": verdict, "comment": "ui e2e"}, headers=headers, timeout=10)
            assert resp.status_code == 200
            results[verdict] = wait_for_run(http, run["run_id"], timeout_s=60)
        assert results["approve"]["status"] == "SUCCEEDED"
        assert "PublishResults" in results["approve"]["state_doc"]
        assert results["reject"]["status"] == "SUCCEEDED"
        assert "PublishResults" not in results["reject"]["state_doc"]

        # a concurrent second-browser verdict surfaces AlreadyDecided (409)
        first = requests.post(f"{deployment.base_url}/providers/review/run",
                              json={"request_id": "ui-conflict",
                                    "body": {"prompt": "double", "reviewers": ["operator"]}},
                              headers=headers, timeout=10).json()
        requests.post(f"{deployment.base_url}/providers/review/respond/{first['action_id']}",
                      json={"decision": "approve"}, headers=headers, timeout=10)
        second = requests.post(f"{deployment.base_url}/providers/review/respond/{first['action_id']}",
                               json={"decision": "reject"}, headers=headers, timeout=10)
        assert second.status_code == 409
        assert second.json()["error"]["code"] == "AlreadyDecided"

        ui_note = "UI bundle served at /ui/" if config.ui_dist else "frontend not built (UI bundle check skipped)"
        if config.ui_dist:
            page = requests.get(f"{deployment.base_url}/ui/", timeout=10)
            assert page.status_code == 200 and 'id="app"' in page.text
        report("secondary-ui-contract", True,
               f"list freshness, review pause/approve/reject, AlreadyDecided; {ui_note}")
    finally:
        deployment.stop()
