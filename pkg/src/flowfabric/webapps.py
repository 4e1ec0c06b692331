"""HTTP route tables for every service.

Apps are built per component and can be mounted under a prefix, which
lets `serve` host the flows service, all four providers, and the web UI
in one process on one port while integration deployments run them as
separate servers.
"""
from __future__ import annotations

import json
import mimetypes
from pathlib import Path
from .auth import TokenStore
from .compute import ComputeAgent, ComputeAgentClient, ComputeProvider
from .engine import Engine
from .errors import NotFound, SchemaViolation
from .httpd import AUTH, PUBLIC, JsonApp, Request, Response
from .protocol import BaseProvider
from .review import ReviewProvider
from .search import SearchProvider
from .transfer import TransferAgent, TransferAgentClient, TransferProvider


def _int(req: Request, key: str, default: int) -> int:
    raw = req.query.get(key)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise SchemaViolation(f"query parameter {key} must be an integer") from None


def _float(req: Request, key: str) -> float | None:
    raw = req.query.get(key)
    if raw is None:
        return None
    try:
        return float(raw)
    except ValueError:
        raise SchemaViolation(f"query parameter {key} must be a number") from None


# -- action-protocol routes (shared by all providers) ---------------------------


def provider_app(provider: BaseProvider, tokens: TokenStore, prefix: str = "") -> JsonApp:
    app = JsonApp(f"provider-{provider.kind}", tokens)
    p = prefix.rstrip("/")

    def introspect(req: Request):
        return provider.introspect()

    def run(req: Request):
        body = req.json()
        record = provider.run(req.token, body.get("request_id", ""), body.get("body", {}),
                              tuple(body.get("monitor_by", [])), tuple(body.get("manage_by", [])))
        return json.loads(record.wire_text())

    def status(req: Request):
        return json.loads(provider.status(req.token, req.params["action_id"]).wire_text())

    def cancel(req: Request):
        return json.loads(provider.cancel(req.token, req.params["action_id"]).wire_text())

    def release(req: Request):
        return provider.release(req.token, req.params["action_id"])

    app.add("GET", f"{p}/", PUBLIC, introspect, "introspect")
    app.add("POST", f"{p}/run", AUTH, run, "run")
    app.add("GET", f"{p}/status/(?P<action_id>[^/]+)", AUTH, status, "status")
    app.add("POST", f"{p}/cancel/(?P<action_id>[^/]+)", AUTH, cancel, "cancel")
    app.add("POST", f"{p}/release/(?P<action_id>[^/]+)", AUTH, release, "release")

    if isinstance(provider, TransferProvider):
        _transfer_admin_routes(app, provider, p)
    elif isinstance(provider, ComputeProvider):
        _compute_admin_routes(app, provider, p)
    elif isinstance(provider, SearchProvider):
        _search_routes(app, provider, p)
    elif isinstance(provider, ReviewProvider):
        _review_routes(app, provider, p)
    return app


def _transfer_admin_routes(app: JsonApp, provider: TransferProvider, p: str) -> None:
    def register_collection(req: Request):
        body = req.json()
        for key in ("agent_url", "root", "name"):
            if not body.get(key):
                raise SchemaViolation(f"collection registration needs {key}")
        agent = TransferAgentClient(body["agent_url"], token=req.token)
        cid = provider.register_collection(agent, body["agent_url"], body["root"], body["name"],
                                           collection_id=body.get("collection_id"))
        return {"collection_id": cid}

    def list_collections(req: Request):
        return {"collections": provider.list_collections()}

    app.add("POST", f"{p}/collections", "transfer:admin", register_collection, "register_collection")
    app.add("GET", f"{p}/collections", AUTH, list_collections, "list_collections")


def _compute_admin_routes(app: JsonApp, provider: ComputeProvider, p: str) -> None:
    def register_function(req: Request):
        return {"function_id": provider.register_function(req.json())}

    def list_functions(req: Request):
        return {"functions": provider.list_functions()}

    def register_endpoint(req: Request):
        body = req.json()
        if not body.get("agent_url"):
            raise SchemaViolation("endpoint registration needs agent_url")
        agent = ComputeAgentClient(body["agent_url"], token=req.token)
        eid = provider.register_endpoint(agent, body["agent_url"],
                                         max_parallel=int(body.get("max_parallel", 1)),
                                         labels=tuple(body.get("labels", [])),
                                         endpoint_id=body.get("endpoint_id"))
        return {"endpoint_id": eid}

    def list_endpoints(req: Request):
        return {"endpoints": provider.list_endpoints()}

    app.add("POST", f"{p}/functions", "compute:register", register_function, "register_function")
    app.add("GET", f"{p}/functions", AUTH, list_functions, "list_functions")
    app.add("POST", f"{p}/endpoints", "compute:admin", register_endpoint, "register_endpoint")
    app.add("GET", f"{p}/endpoints", AUTH, list_endpoints, "list_endpoints")


def _search_routes(app: JsonApp, provider: SearchProvider, p: str) -> None:
    def create_index(req: Request):
        body = req.json()
        return {"index_id": provider.create_index(body.get("name", ""), body.get("facet_fields", []))}

    def list_indexes(req: Request):
        return {"indexes": provider.list_indexes()}

    def query(req: Request):
        filters = []
        for pair in req.query.get("filter", "").split(","):
            if pair:
                if "=" not in pair:
                    raise SchemaViolation(f"filter {pair!r} must be field=value")
                fld, val = pair.split("=", 1)
                filters.append((fld, val))
        facets = [f for f in req.query.get("facets", "").split(",") if f] or None
        return provider.query(req.ctx.principal.principal_id, req.params["index_id"],
                              q=req.query.get("q", ""), filters=filters, facets=facets,
                              limit=_int(req, "limit", 50), offset=_int(req, "offset", 0))

    def get_subject(req: Request):
        return provider.get_by_subject(req.ctx.principal.principal_id,
                                       req.params["index_id"], req.query.get("subject", ""))

    app.add("POST", f"{p}/indexes", "search:admin", create_index, "create_index")
    app.add("GET", f"{p}/indexes", AUTH, list_indexes, "list_indexes")
    app.add("GET", f"{p}/indexes/(?P<index_id>[^/]+)/query", AUTH, query, "query")
    app.add("GET", f"{p}/indexes/(?P<index_id>[^/]+)/subject", AUTH, get_subject, "get_subject")


def _review_routes(app: JsonApp, provider: ReviewProvider, p: str) -> None:
    def inbox(req: Request):
        return {"pending": provider.list_pending(req.token)}

    def respond(req: Request):
        body = req.json()
        record = provider.respond(req.token, req.params["action_id"],
                                  body.get("decision", ""), body.get("comment", ""))
        return json.loads(record.wire_text())

    app.add("GET", f"{p}/inbox", AUTH, inbox, "inbox")
    app.add("POST", f"{p}/respond/(?P<action_id>[^/]+)", AUTH, respond, "respond")


# -- flows service ------------------------------------------------------------------


def flows_app(engine: Engine, tokens: TokenStore, prefix: str = "") -> JsonApp:
    app = JsonApp("flows-service", tokens)
    p = prefix.rstrip("/")

    def deploy(req: Request):
        return engine.deploy_flow(req.ctx, req.json())

    def list_flows(req: Request):
        return {"flows": engine.list_flows(req.ctx)}

    def get_flow(req: Request):
        return engine.get_flow(req.ctx, req.params["flow_id"])

    def start_run(req: Request):
        body = req.json()
        return engine.start_run(req.ctx, req.params["flow_id"], body.get("input", {}),
                                run_key=body.get("run_key"))

    def list_runs(req: Request):
        return engine.list_runs(req.ctx,
                                flow_id=req.query.get("flow_id"),
                                status=req.query.get("status"),
                                since=_float(req, "since"), until=_float(req, "until"),
                                limit=_int(req, "limit", 50),
                                cursor=req.query.get("cursor"))

    def get_run(req: Request):
        return engine.get_run(req.ctx, req.params["run_id"])

    def get_events(req: Request):
        events = engine.get_events(req.ctx, req.params["run_id"])
        after = _int(req, "after_seq", 0)
        if after:
            events = [e for e in events if e["seq"] > after]
        return {"events": events}

    def cancel_run(req: Request):
        return engine.cancel_run(req.ctx, req.params["run_id"])

    app.add("POST", f"{p}/flows", AUTH, deploy, "deploy_flow")
    app.add("GET", f"{p}/flows", AUTH, list_flows, "list_flows")
    app.add("GET", f"{p}/flows/(?P<flow_id>[^/]+)", AUTH, get_flow, "get_flow")
    app.add("POST", f"{p}/flows/(?P<flow_id>[^/]+)/run", AUTH, start_run, "start_run")
    app.add("GET", f"{p}/runs", AUTH, list_runs, "list_runs")
    app.add("GET", f"{p}/runs/(?P<run_id>[^/]+)/events", AUTH, get_events, "get_events")
    app.add("GET", f"{p}/runs/(?P<run_id>[^/]+)", AUTH, get_run, "get_run")
    app.add("POST", f"{p}/runs/(?P<run_id>[^/]+)/cancel", AUTH, cancel_run, "cancel_run")
    return app


# -- endpoint agents ------------------------------------------------------------------


def transfer_agent_app(agent: TransferAgent, tokens: TokenStore) -> JsonApp:
    app = JsonApp("transfer-agent", tokens)
    scope = "transfer:agent"

    def stat(req: Request):
        return agent.stat(req.query.get("root", ""), req.query.get("path", ""),
                          want_digest=req.query.get("digest") == "1")

    def read(req: Request):
        offset = _int(req, "offset", 0)
        length = _int(req, "len", 4 * 1024 * 1024)
        data, sha, size, eof = agent.read_chunk(req.query.get("root", ""),
                                                req.query.get("path", ""), offset, length)
        return Response(200, data, headers={
            "X-Chunk-Sha256": sha, "X-File-Size": str(size), "X-Eof": "1" if eof else "0"})

    def open_session(req: Request):
        body = req.json()
        return agent.open_session(body.get("session_key", ""), body.get("root", ""),
                                  body.get("path", ""), int(body.get("total_bytes", 0)),
                                  source=body.get("source"), chunk_size=body.get("chunk_size"))

    def session_status(req: Request):
        return agent.session_status(req.params["sid"])

    def put_chunk(req: Request):
        return agent.put_chunk(req.params["sid"], _int(req, "offset", 0), req.body,
                               chunk_sha=req.headers.get("X-Chunk-Sha256"))

    def commit(req: Request):
        return agent.commit(req.params["sid"], req.json().get("sha256", ""))

    def abort(req: Request):
        return agent.abort(req.params["sid"])

    app.add("GET", "/stat", scope, stat, "stat")
    app.add("GET", "/read", scope, read, "read")
    app.add("POST", "/write-session", scope, open_session, "open_session")
    app.add("GET", "/write-session/(?P<sid>[^/]+)", scope, session_status, "session_status")
    app.add("PUT", "/write-session/(?P<sid>[^/]+)/chunk", scope, put_chunk, "put_chunk")
    app.add("POST", "/write-session/(?P<sid>[^/]+)/commit", scope, commit, "commit")
    app.add("POST", "/write-session/(?P<sid>[^/]+)/abort", scope, abort, "abort")
    return app


def compute_agent_app(agent: ComputeAgent, tokens: TokenStore) -> JsonApp:
    app = JsonApp("compute-agent", tokens)
    scope = "compute:agent"

    def submit(req: Request):
        body = req.json()
        if not body.get("task_id"):
            raise SchemaViolation("task submission needs task_id")
        return agent.submit(body["task_id"], body.get("function", {}), body.get("args", {}))

    def get_task(req: Request):
        return agent.get(req.params["task_id"])

    def cancel_task(req: Request):
        return agent.cancel(req.params["task_id"])

    app.add("POST", "/tasks", scope, submit, "submit_task")
    app.add("GET", "/tasks/(?P<task_id>[^/]+)", scope, get_task, "get_task")
    app.add("POST", "/tasks/(?P<task_id>[^/]+)/cancel", scope, cancel_task, "cancel_task")
    return app


# -- static file serving (web UI) ---------------------------------------------------------


def static_routes(app: JsonApp, prefix: str, root: Path) -> None:
    root = Path(root)

    def serve(req: Request):
        rel = req.params.get("path") or "index.html"
        target = (root / rel).resolve()
        if root.resolve() not in target.parents and target != root.resolve():
            raise NotFound("outside static root")
        if target.is_dir():
            target = target / "index.html"
        if not target.is_file():
            target = root / "index.html"  # SPA fallback
            if not target.is_file():
                raise NotFound(f"no static file {rel}")
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        return Response(200, target.read_bytes(), content_type=ctype)

    app.add("GET", f"{prefix}/(?P<path>.*)", PUBLIC, serve, "static")
    app.add("GET", prefix, PUBLIC, serve, "static_index")


def merge_apps(name: str, tokens: TokenStore, *apps: JsonApp) -> JsonApp:
    merged = JsonApp(name, tokens)
    for app in apps:
        merged.routes.extend(app.routes)
    return merged
