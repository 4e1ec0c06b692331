"""Command-line interface: one binary covering deployment, operation, and
inspection. Every subcommand is a thin shell over module operations.

Machine-readable output: pass --format records to get one JSON object
per line instead of human tables.
"""
from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import time
from pathlib import Path

from .auth import TokenStore
from .client import HttpServiceClient
from .deploy import Deployment, DeploymentConfig
from .errors import FabricError
from .fixtures import DATA_PROFILES, FIXTURE_NAMES
from .httpd import AppServer
from .metrics import (TABLE1_COLUMNS, concurrency_timeline, distribution_report,
                      load_runs_dir, render_tsv, summaries_by_flow, table1_rows)
from .model import parse_flow_text, flow_violations
from .storage import NdjsonLog, read_json
from .triggers import TriggerDaemon, rules_from_doc


def _records(value) -> str:
    if isinstance(value, list):
        return "\n".join(json.dumps(v, sort_keys=True) for v in value)
    return json.dumps(value, sort_keys=True)


def _service(args) -> HttpServiceClient:
    url = args.service or os.environ.get("FLOWFABRIC_SERVICE")
    token = args.token or os.environ.get("FLOWFABRIC_TOKEN")
    if not url or not token:
        raise FabricError("need --service URL and --token (or FLOWFABRIC_SERVICE / FLOWFABRIC_TOKEN)")
    return HttpServiceClient(url, token)


def _provider_transport(args, kind: str):
    from .protocol import HttpTransport

    url = args.service or os.environ.get("FLOWFABRIC_SERVICE")
    token = args.token or os.environ.get("FLOWFABRIC_TOKEN")
    if not url or not token:
        raise FabricError("need --service URL and --token (or FLOWFABRIC_SERVICE / FLOWFABRIC_TOKEN)")
    return HttpTransport(f"{url.rstrip('/')}/providers/{kind}"), token


def _load_json_arg(raw: str):
    if raw.startswith("@"):
        return json.loads(Path(raw[1:]).read_text())
    return json.loads(raw)


def _duration(raw: str) -> float:
    """'60', '60s', '2m', '1h' -> seconds."""
    raw = raw.strip().lower()
    factor = 1.0
    if raw.endswith("h"):
        raw, factor = raw[:-1], 3600.0
    elif raw.endswith("m"):
        raw, factor = raw[:-1], 60.0
    elif raw.endswith("s"):
        raw = raw[:-1]
    return float(raw) * factor


# -- subcommand implementations ---------------------------------------------------


def cmd_serve(args) -> int:
    data_dir = Path(args.data_dir)
    credentials = Path(args.credentials) if args.credentials else data_dir / "credentials.json"
    config = DeploymentConfig(data_dir=data_dir, credentials_path=credentials, mode="serve",
                              port=args.port, time_scale=args.time_scale,
                              ui_dist=Path(args.ui) if args.ui else _default_ui_dist())
    deployment = Deployment(config)
    print(f"fabric:      {deployment.base_url}")
    print(f"web ui:      {deployment.base_url}/ui/")
    print(f"credentials: {credentials}")
    print(f"admin token: {deployment.admin_token}")
    print(f"collections: instrument={deployment.instrument_collection} "
          f"cluster={deployment.cluster_collection} publish={deployment.publish_collection}")
    print(f"endpoint:    {deployment.endpoint_id}  index: {deployment.index_id}")
    stop = {"flag": False}

    def on_signal(_sig, _frame):
        stop["flag"] = True

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    while not stop["flag"]:
        time.sleep(0.2)
    deployment.stop()
    return 0


def _default_ui_dist() -> Path | None:
    candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return candidate if candidate.is_dir() else None


def cmd_endpoint_transfer_start(args) -> int:
    from .transfer import TransferAgent
    from .webapps import transfer_agent_app

    tokens = TokenStore(Path(args.credentials))
    peer_token = args.peer_token
    if not peer_token:
        # pull-mode fetches from peer agents need credentials of our own
        tokens.ensure_principal("fabric-service", kind="service")
        peer_token = tokens.mint_token("fabric-service", ["transfer:agent"]).secret
    agent = TransferAgent([Path(r) for r in args.root], peer_token=peer_token)
    server = AppServer(transfer_agent_app(agent, tokens), port=args.port).start()
    label = f" ({args.name})" if args.name else ""
    print(f"transfer agent{label}: {server.url} exporting {', '.join(args.root)}")
    _wait_forever()
    server.stop()
    return 0


def cmd_endpoint_compute_start(args) -> int:
    from .compute import ComputeAgent
    from .webapps import compute_agent_app

    tokens = TokenStore(Path(args.credentials))
    agent = ComputeAgent(Path(args.data_dir), max_parallel=args.parallel,
                         labels=tuple(args.label or ()))
    server = AppServer(compute_agent_app(agent, tokens), port=args.port).start()
    print(f"compute agent: {server.url} parallel={args.parallel} labels={args.label or []}")
    _wait_forever()
    agent.stop()
    server.stop()
    return 0


def _wait_forever() -> None:
    stop = {"flag": False}

    def on_signal(_sig, _frame):
        stop["flag"] = True

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    while not stop["flag"]:
        time.sleep(0.2)


def cmd_flow_lint(args) -> int:
    flow = parse_flow_text(Path(args.file).read_text())
    violations = flow_violations(flow)
    if not violations:
        print(f"OK: {args.file} ({len(flow.states)} states, start_at={flow.start_at})")
        return 0
    for v in violations:
        print(f"{v.code}: {v.message}", file=sys.stderr)
    return 1


def cmd_flow_deploy(args) -> int:
    client = _service(args)
    out = client.deploy_flow(json.loads(Path(args.file).read_text()))
    print(_records(out) if args.format == "records" else f"deployed {out['flow_id']} ({out.get('title', '')})")
    return 0


def cmd_flow_run(args) -> int:
    client = _service(args)
    view = client.start_run(args.flow_id, _load_json_arg(args.input), run_key=args.run_key)
    if args.format == "records":
        print(_records(view))
    else:
        print(f"run {view['run_id']} {view['status']} cursor={view['cursor']}")
    if args.watch:
        return _watch(client, view["run_id"], args.format)
    return 0


def cmd_run_list(args) -> int:
    client = _service(args)
    page = client.list_runs(flow_id=args.flow, status=args.status, limit=args.limit)
    if args.format == "records":
        print(_records(page["runs"]))
        return 0
    for r in page["runs"]:
        print(f"{r['run_id']}  {r['status']:<10} {r['flow_id']}  started={r['started_at']}")
    return 0


def _watch(client, run_id: str, fmt: str) -> int:
    seen = 0
    while True:
        for ev in client.get_events(run_id, after_seq=seen):
            seen = ev["seq"]
            if fmt == "records":
                print(_records(ev))
            else:
                print(f"[{ev['seq']:>3}] {ev['ts']}  {ev['kind']:<16} {ev['step']}")
        view = client.get_run(run_id)
        if view["status"] != "ACTIVE":
            print(f"run {run_id} -> {view['status']}")
            return 0 if view["status"] == "SUCCEEDED" else 1
        time.sleep(0.5)


def cmd_run_watch(args) -> int:
    return _watch(_service(args), args.run_id, args.format)


def cmd_run_cancel(args) -> int:
    view = _service(args).cancel_run(args.run_id)
    print(f"run {view['run_id']} -> {view['status']}")
    return 0


def cmd_trigger_start(args) -> int:
    client = _service(args)
    rules = rules_from_doc(json.loads(Path(args.config).read_text()))
    daemon = TriggerDaemon(client, rules, Path(args.data_dir),
                           poll_interval_s=args.poll_interval, debounce_s=args.debounce)
    daemon.start()
    print(f"trigger daemon watching {len(rules)} rule(s); journals in {args.data_dir}")
    _wait_forever()
    daemon.stop()
    return 0


def cmd_trigger_status(args) -> int:
    status = read_json(Path(args.data_dir) / "status.json")
    if status is None:
        print("no status written yet", file=sys.stderr)
        return 1
    if args.format == "records":
        print(_records(status))
        return 0
    for rule_id, s in status["rules"].items():
        print(f"{rule_id:<16} files={s['files_seen']:<6} pending={s['pending']:<5} "
              f"fired={s['batches_fired']:<5} acked={s['acked']:<5} dead={s['dead']:<3} "
              f"cum={s['cumulative']:<8} suspended={s['suspended']}")
    return 0


def cmd_trigger_dead_letters(args) -> int:
    from .storage import read_ndjson

    letters = []
    for journal in sorted(Path(args.data_dir).glob("*.journal")):
        dead = {}
        intents = {}
        for rec in read_ndjson(journal):
            if rec.get("kind") == "intent":
                intents[rec["seq"]] = rec.get("files", [])
            elif rec.get("kind") == "dead":
                dead[rec["seq"]] = rec.get("error", "")
        for seq, error in sorted(dead.items()):
            letters.append({"rule_id": journal.stem, "seq": seq, "error": error,
                            "files": intents.get(seq, [])})
    print(_records(letters) if args.format == "records" else
          "\n".join(f"{l['rule_id']}#{l['seq']}: {l['error']} ({len(l['files'])} files)"
                    for l in letters) or "no dead letters")
    return 0


def cmd_trigger_reset_threshold(args) -> int:
    journal = Path(args.data_dir) / f"{args.rule_id}.journal"
    if not journal.exists():
        print(f"no journal for rule {args.rule_id}", file=sys.stderr)
        return 1
    log = NdjsonLog(journal)
    log.append({"kind": "reset", "ts": time.time()})
    log.close()
    print(f"threshold reset recorded for {args.rule_id} (takes effect on daemon restart)")
    return 0


def cmd_index_create(args) -> int:
    transport, token = _provider_transport(args, "search")
    out = transport._call("POST", "/indexes", token,
                          {"name": args.name, "facet_fields": (args.facets or "").split(",") if args.facets else []})
    print(out["index_id"])
    return 0


def cmd_index_query(args) -> int:
    import requests

    url = args.service or os.environ.get("FLOWFABRIC_SERVICE")
    token = args.token or os.environ.get("FLOWFABRIC_TOKEN")
    resp = requests.get(f"{url.rstrip('/')}/providers/search/indexes/{args.index_id}/query",
                        params={"q": args.q or "", "filter": args.filter or "",
                                "facets": args.facets or "", "limit": args.limit},
                        headers={"Authorization": f"Bearer {token}"}, timeout=30)
    body = resp.json()
    if resp.status_code >= 400:
        print(json.dumps(body), file=sys.stderr)
        return 1
    if args.format == "records":
        print(_records(body))
        return 0
    print(f"total={body['total']}")
    for doc in body["results"]:
        print(f"  {doc['subject']}: {json.dumps(doc['content'], sort_keys=True)[:120]}")
    for facet, counts in body.get("facets", {}).items():
        print(f"  facet {facet}: {counts}")
    return 0


def cmd_review_inbox(args) -> int:
    transport, token = _provider_transport(args, "review")
    out = transport._call("GET", "/inbox", token)
    if args.format == "records":
        print(_records(out["pending"]))
        return 0
    if not out["pending"]:
        print("inbox empty")
        return 0
    for item in out["pending"]:
        print(f"{item['action_id']}  {item['prompt']}  refs={item['payload_refs']}")
    return 0


def cmd_review_respond(args) -> int:
    transport, token = _provider_transport(args, "review")
    out = transport._call("POST", f"/respond/{args.action_id}", token,
                          {"decision": args.decision, "comment": args.comment or ""})
    print(f"{args.action_id} -> {out['status']} ({out['details'].get('decision')})")
    return 0


def cmd_fixture_list(args) -> int:
    rows = []
    for name in FIXTURE_NAMES:
        profile = DATA_PROFILES[name]
        rows.append({"name": name,
                     "tiny": f"{profile['tiny'][0]} x {profile['tiny'][1]} B",
                     "small": f"{profile['small'][0]} x {profile['small'][1]} B"})
    if args.format == "records":
        print(_records(rows))
        return 0
    for r in rows:
        print(f"{r['name']:<12} tiny: {r['tiny']:<18} small: {r['small']}")
    return 0


def cmd_fixture_run(args) -> int:
    import tempfile

    data_dir = Path(args.data_dir) if args.data_dir else Path(tempfile.mkdtemp(prefix="flowfabric-"))
    config = DeploymentConfig(data_dir=data_dir, time_scale=args.time_scale)
    deployment = Deployment(config)
    try:
        out = deployment.run_fixture(args.name, args.scale, timeout_s=args.timeout)
        s = out["summary"]
        row = {"run_id": out["view"]["run_id"], "flow": s.flow, "status": s.status,
               "runtime_s": round(s.runtime_s, 3), "transfer_s": round(s.transfer_s, 3),
               "compute_s": round(s.compute_s, 3), "search_s": round(s.search_s, 3),
               "oh_s": round(s.oh_s, 3), "oh_pct": round(s.oh_pct, 1)}
        if args.format == "records":
            print(_records(row))
        else:
            print(f"run {row['run_id']}: {row['status']}")
            print(f"{s.flow}: runtime={row['runtime_s']}s transfer={row['transfer_s']}s "
                  f"compute={row['compute_s']}s search={row['search_s']}s "
                  f"oh={row['oh_s']}s ({row['oh_pct']}%)")
        print(f"data dir: {data_dir}")
        return 0 if s.status == "SUCCEEDED" else 1
    finally:
        deployment.stop()


def cmd_report_table1(args) -> int:
    runs = load_runs_dir(Path(args.runs))
    titles = _flow_titles(Path(args.runs))
    rows = table1_rows(summaries_by_flow(runs, flow_titles=titles))
    if args.format == "records":
        print(_records([dict(zip(TABLE1_COLUMNS, row)) for row in rows]))
        return 0
    sys.stdout.write(render_tsv(TABLE1_COLUMNS, rows))
    return 0


def _flow_titles(runs_dir: Path) -> dict[str, str]:
    base = runs_dir if (runs_dir / "flows").is_dir() else runs_dir.parent
    titles = {}
    for path in (base / "flows").glob("flow-*.json") if (base / "flows").is_dir() else []:
        doc = read_json(path)
        if doc:
            titles[doc["flow_id"]] = doc["definition"].get("title") or doc["flow_id"]
    return titles


def cmd_report_timeline(args) -> int:
    runs = load_runs_dir(Path(args.runs))
    intervals = []
    for header, events in runs:
        if not events:
            continue
        start = header.get("started_at")
        end = events[-1].get("wall")
        if start and end and events[-1]["kind"] in ("RunCompleted", "RunFailed", "RunCanceled"):
            intervals.append((start, end))
    series = concurrency_timeline(intervals, args.bucket)
    if args.format == "records":
        print(_records([{"t": t, "active": n} for t, n in series]))
        return 0
    sys.stdout.write(render_tsv(("time", "active_runs"), [[f"{t:.0f}", str(n)] for t, n in series]))
    return 0


def cmd_report_dist(args) -> int:
    runs = load_runs_dir(Path(args.runs))
    titles = _flow_titles(Path(args.runs))
    groups = {flow: [s.runtime_s for s in summaries]
              for flow, summaries in summaries_by_flow(runs, flow_titles=titles).items()}
    report = distribution_report(groups)
    if args.format == "records":
        print(_records([{"flow": k, **v} for k, v in sorted(report.items())]))
        return 0
    rows = []
    for flow, r in sorted(report.items()):
        if r.get("partial"):
            rows.append([flow, str(r["n"]), "", f"{r['median']:.2f}", "", "", ""])
        else:
            rows.append([flow, str(r["n"]), f"{r['q1']:.2f}", f"{r['median']:.2f}",
                         f"{r['q3']:.2f}", f"{r['whisker_lo']:.2f}", f"{r['whisker_hi']:.2f}"])
    sys.stdout.write(render_tsv(("Flow", "n", "q1", "median", "q3", "whisker_lo", "whisker_hi"), rows))
    return 0


def cmd_auth_mint(args) -> int:
    store = TokenStore(Path(args.credentials))
    store.ensure_principal(args.principal)
    token = store.mint_token(args.principal, args.scopes.split(","),
                             ttl_s=args.ttl if args.ttl else None)
    print(token.secret)
    return 0


def cmd_auth_revoke(args) -> int:
    store = TokenStore(Path(args.credentials))
    if store.revoke(args.token_secret):
        print("revoked")
        return 0
    print("no such token", file=sys.stderr)
    return 1


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowfabric",
                                     description="Self-hosted research-automation fabric")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--service", default=None, help="flows service base URL")
        p.add_argument("--token", default=None, help="bearer token")
        p.add_argument("--format", default="table", choices=["table", "records"])
        return p

    p = sub.add_parser("serve", help="run the whole fabric in one process")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--credentials", default=None)
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--time-scale", type=float, default=1.0)
    p.add_argument("--ui", default=None, help="path to the built web UI (frontend/dist)")
    p.set_defaults(fn=cmd_serve)

    ep = sub.add_parser("endpoint", help="run an endpoint agent").add_subparsers(dest="agent", required=True)
    p = ep.add_parser("transfer").add_subparsers(dest="verb", required=True).add_parser("start")
    p.add_argument("--root", action="append", required=True)
    p.add_argument("--name", default=None, help="display label for this agent")
    p.add_argument("--credentials", required=True)
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--peer-token", default=None, help="token for pulls from peer agents")
    p.set_defaults(fn=cmd_endpoint_transfer_start)
    p = ep.add_parser("compute").add_subparsers(dest="verb", required=True).add_parser("start")
    p.add_argument("--parallel", type=int, default=2)
    p.add_argument("--label", action="append")
    p.add_argument("--credentials", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--port", type=int, default=0)
    p.set_defaults(fn=cmd_endpoint_compute_start)

    flow = sub.add_parser("flow", help="author and run flows").add_subparsers(dest="verb", required=True)
    p = flow.add_parser("lint")
    p.add_argument("file")
    p.set_defaults(fn=cmd_flow_lint)
    p = common(flow.add_parser("deploy"))
    p.add_argument("file")
    p.set_defaults(fn=cmd_flow_deploy)
    p = common(flow.add_parser("run"))
    p.add_argument("flow_id")
    p.add_argument("--input", required=True, help="JSON document or @file")
    p.add_argument("--run-key", default=None)
    p.add_argument("--watch", action="store_true")
    p.set_defaults(fn=cmd_flow_run)

    run = sub.add_parser("run", help="inspect and manage runs").add_subparsers(dest="verb", required=True)
    p = common(run.add_parser("list"))
    p.add_argument("--flow", default=None)
    p.add_argument("--status", default=None)
    p.add_argument("--limit", type=int, default=50)
    p.set_defaults(fn=cmd_run_list)
    p = common(run.add_parser("watch"))
    p.add_argument("run_id")
    p.set_defaults(fn=cmd_run_watch)
    p = common(run.add_parser("cancel"))
    p.add_argument("run_id")
    p.set_defaults(fn=cmd_run_cancel)

    trig = sub.add_parser("trigger", help="file-event trigger daemon").add_subparsers(dest="verb", required=True)
    p = common(trig.add_parser("start"))
    p.add_argument("--config", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--poll-interval", type=float, default=0.25)
    p.add_argument("--debounce", type=float, default=0.5)
    p.set_defaults(fn=cmd_trigger_start)
    p = common(trig.add_parser("status"))
    p.add_argument("--data-dir", required=True)
    p.set_defaults(fn=cmd_trigger_status)
    p = common(trig.add_parser("dead-letters"))
    p.add_argument("--data-dir", required=True)
    p.set_defaults(fn=cmd_trigger_dead_letters)
    p = common(trig.add_parser("reset-threshold"))
    p.add_argument("rule_id")
    p.add_argument("--data-dir", required=True)
    p.set_defaults(fn=cmd_trigger_reset_threshold)

    index = sub.add_parser("index", help="search catalog").add_subparsers(dest="verb", required=True)
    p = common(index.add_parser("create"))
    p.add_argument("name")
    p.add_argument("--facets", default=None)
    p.set_defaults(fn=cmd_index_create)
    p = common(index.add_parser("query"))
    p.add_argument("index_id")
    p.add_argument("--q", default=None)
    p.add_argument("--filter", default=None, help="field=value[,field=value]")
    p.add_argument("--facets", default=None)
    p.add_argument("--limit", type=int, default=20)
    p.set_defaults(fn=cmd_index_query)

    review = sub.add_parser("review", help="human review queue").add_subparsers(dest="verb", required=True)
    p = common(review.add_parser("inbox"))
    p.set_defaults(fn=cmd_review_inbox)
    p = common(review.add_parser("respond"))
    p.add_argument("action_id")
    p.add_argument("decision", choices=["approve", "reject"])
    p.add_argument("--comment", default=None)
    p.set_defaults(fn=cmd_review_respond)

    fixture = sub.add_parser("fixture", help="bundled demo flows").add_subparsers(dest="verb", required=True)
    p = common(fixture.add_parser("list"))
    p.set_defaults(fn=cmd_fixture_list)
    p = common(fixture.add_parser("run"))
    p.add_argument("name", choices=list(FIXTURE_NAMES))
    p.add_argument("--scale", default="tiny", choices=["tiny", "small"])
    p.add_argument("--data-dir", default=None)
    p.add_argument("--time-scale", type=float, default=0.01)
    p.add_argument("--timeout", type=float, default=600.0)
    p.set_defaults(fn=cmd_fixture_run)

    report = sub.add_parser("report", help="metrics from run logs").add_subparsers(dest="verb", required=True)
    p = common(report.add_parser("table1"))
    p.add_argument("--runs", required=True, help="flows-service data directory")
    p.set_defaults(fn=cmd_report_table1)
    p = common(report.add_parser("timeline"))
    p.add_argument("--runs", required=True)
    p.add_argument("--bucket", type=_duration, default=60.0, help="bucket width, e.g. 60 or 60s")
    p.set_defaults(fn=cmd_report_timeline)
    p = common(report.add_parser("dist"))
    p.add_argument("--runs", required=True)
    p.set_defaults(fn=cmd_report_dist)

    auth = sub.add_parser("auth", help="manage principals and tokens").add_subparsers(dest="verb", required=True)
    p = auth.add_parser("mint")
    p.add_argument("--principal", required=True)
    p.add_argument("--scopes", required=True)
    p.add_argument("--ttl", type=float, default=None)
    p.add_argument("--credentials", required=True)
    p.set_defaults(fn=cmd_auth_mint)
    p = auth.add_parser("revoke")
    p.add_argument("token_secret")
    p.add_argument("--credentials", required=True)
    p.set_defaults(fn=cmd_auth_revoke)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FabricError as exc:
        print(json.dumps(exc.to_body()), file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
