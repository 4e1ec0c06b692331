"""Deployment assembly: wire agents, providers, the flows service, and
(optionally) HTTP servers into a working fabric.

Local mode binds providers in-process behind local:// URLs (fast, used
by tests and `fixture run`). Serve mode hosts everything over HTTP: the
flows API at the root, each provider under /providers/<kind>, agents on
their own ports, and the web UI under /ui.
"""
from __future__ import annotations

import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .auth import TokenStore
from .client import LocalServiceClient, wait_for_run
from .compute import ComputeAgent, ComputeAgentClient, ComputeProvider
from .engine import BackoffPolicy, Engine, RetryPolicy
from .fixtures import ProviderUrls, build_fixture, generate_data
from .httpd import AppServer
from .metrics import summarize_run
from .protocol import ProviderDirectory
from .review import ReviewProvider
from .search import SearchProvider
from .transfer import TransferAgent, TransferAgentClient, TransferProvider
from .webapps import (compute_agent_app, flows_app, merge_apps, provider_app,
                      static_routes, transfer_agent_app)


@dataclass
class DeploymentConfig:
    data_dir: Path
    credentials_path: Path | None = None
    mode: str = "local"              # local | serve
    port: int = 0                    # serve port (0 = ephemeral)
    time_scale: float = 1.0          # <1 compresses every configured duration
    workers: int = 8
    max_parallel: int = 8
    backoff: BackoffPolicy | None = None
    retry: RetryPolicy | None = None
    ui_dist: Path | None = None

    def scaled_backoff(self) -> BackoffPolicy:
        if self.backoff is not None:
            return self.backoff
        ts = self.time_scale
        return BackoffPolicy(initial=1.0 * ts, factor=2.0, cap=600.0 * ts)

    def scaled_retry(self) -> RetryPolicy:
        if self.retry is not None:
            return self.retry
        ts = self.time_scale
        return RetryPolicy(delays=(1.0 * ts, 4.0 * ts, 16.0 * ts))


class Deployment:
    """A single-host fabric: three collections (instrument, cluster,
    publish), one compute endpoint, a search catalog, and a review queue."""

    def __init__(self, config: DeploymentConfig):
        self.config = config
        data = Path(config.data_dir)
        data.mkdir(parents=True, exist_ok=True)

        self.tokens = TokenStore(config.credentials_path)
        self.tokens.ensure_principal("operator", kind="human")
        self.tokens.ensure_principal("fabric-service", kind="service")
        self.admin_token = self.tokens.mint_token("operator", ["*"]).secret
        self.agent_token = self.tokens.mint_token(
            "fabric-service", ["transfer:agent", "compute:agent"]).secret

        self.instrument_root = data / "collections" / "instrument"
        self.cluster_root = data / "collections" / "cluster"
        self.publish_root = data / "collections" / "publish"
        for root in (self.instrument_root, self.cluster_root, self.publish_root):
            root.mkdir(parents=True, exist_ok=True)

        self._local_peers: dict[str, Any] = {}
        self.transfer_agent = TransferAgent(
            [self.instrument_root, self.cluster_root, self.publish_root],
            peer_resolver=self._resolve_peer)
        self.compute_agent = ComputeAgent(data / "compute-agent", max_parallel=config.max_parallel)

        self.transfer = TransferProvider(self.tokens)
        self.compute = ComputeProvider(self.tokens)
        self.search = SearchProvider(self.tokens, data_dir=data / "search")
        self.review = ReviewProvider(self.tokens)
        self.directory = ProviderDirectory()
        self._servers: list[AppServer] = []
        self.base_url: str | None = None

        if config.mode == "serve":
            transfer_srv = AppServer(transfer_agent_app(self.transfer_agent, self.tokens)).start()
            compute_srv = AppServer(compute_agent_app(self.compute_agent, self.tokens)).start()
            self._servers.extend([transfer_srv, compute_srv])
            agent_url = transfer_srv.url
            transfer_handle = TransferAgentClient(transfer_srv.url, token=self.agent_token)
            compute_handle = ComputeAgentClient(compute_srv.url, token=self.agent_token)
        else:
            agent_url = "local://agents"
            self._local_peers[agent_url] = self.transfer_agent
            transfer_handle = self.transfer_agent
            compute_handle = self.compute_agent
            self.provider_urls = ProviderUrls(
                transfer=self.directory.bind_local("transfer", self.transfer),
                compute=self.directory.bind_local("compute", self.compute),
                search=self.directory.bind_local("search", self.search),
                review=self.directory.bind_local("review", self.review),
            )
        self.agent_url = agent_url

        self.instrument_collection = self.transfer.register_collection(
            transfer_handle, agent_url, str(self.instrument_root), "instrument")
        self.cluster_collection = self.transfer.register_collection(
            transfer_handle, agent_url, str(self.cluster_root), "cluster")
        self.publish_collection = self.transfer.register_collection(
            transfer_handle, agent_url, str(self.publish_root), "publish")
        self.endpoint_id = self.compute.register_endpoint(
            compute_handle, agent_url, max_parallel=config.max_parallel, endpoint_id="ep-local")
        self.index_id = self.search.create_index("fabric-catalog", ["stage", "fixture"])

        self.engine = Engine(data / "service", self.directory, self.tokens,
                             backoff=config.scaled_backoff(), retry=config.scaled_retry(),
                             workers=config.workers)
        self.engine.start()

        if config.mode == "serve":
            apps = [flows_app(self.engine, self.tokens)]
            for kind, provider in (("transfer", self.transfer), ("compute", self.compute),
                                   ("search", self.search), ("review", self.review)):
                apps.append(provider_app(provider, self.tokens, prefix=f"/providers/{kind}"))
            merged = merge_apps("fabric", self.tokens, *apps)
            if config.ui_dist and Path(config.ui_dist).is_dir():
                static_routes(merged, "/ui", Path(config.ui_dist))
            front = AppServer(merged, port=config.port).start()
            self._servers.append(front)
            self.base_url = front.url
            self.provider_urls = ProviderUrls(
                transfer=f"{front.url}/providers/transfer",
                compute=f"{front.url}/providers/compute",
                search=f"{front.url}/providers/search",
                review=f"{front.url}/providers/review",
            )

        self.client = LocalServiceClient(self.engine, self.tokens, self.admin_token)

    def _resolve_peer(self, url: str):
        if url in self._local_peers:
            return self._local_peers[url]
        return TransferAgentClient(url, token=self.agent_token)

    # -- fixture driving -------------------------------------------------------------

    def fixture_input(self, batch_rel: str, subject: str | None = None,
                      extra: dict[str, Any] | None = None) -> dict[str, Any]:
        doc = {
            "compute_endpoint_id": self.endpoint_id,
            "transfer_source_collection_id": self.instrument_collection,
            "transfer_destination_collection_id": self.cluster_collection,
            "transfer_source_path": batch_rel,
            "transfer_destination_path": f"staging/{batch_rel}",
            "publish_collection_id": self.publish_collection,
            "search_index_id": self.index_id,
            "staging_root": str(self.cluster_root),
            "batch_scope": batch_rel.rsplit("/", 1)[-1],
            "dataset_subject": subject or f"dataset/{batch_rel}",
            "hits_per_batch": 400,
            "cumulative_hits": 1000,
        }
        if extra:
            doc.update(extra)
        return doc

    def run_fixture(self, name: str, scale: str = "tiny", seed: int = 0,
                    timeout_s: float = 300.0, with_acquire_nodes: bool = False) -> dict[str, Any]:
        """Deploy, generate data, run to terminal, and summarize."""
        fixture = build_fixture(name, self.provider_urls, scale, with_acquire_nodes=with_acquire_nodes)
        for fn in fixture.functions:
            self.compute.register_function(fn)
        deployed = self.client.deploy_flow(fixture.flow.to_doc())
        batch_rel = f"acquired/{name.lower()}-{scale}-{seed}-{uuid.uuid4().hex[:6]}"
        generate_data(name, scale, self.instrument_root / batch_rel, seed=seed)
        run = self.client.start_run(deployed["flow_id"], self.fixture_input(batch_rel))
        view = wait_for_run(self.client, run["run_id"], timeout_s=timeout_s)
        header = self.engine.runs.header(run["run_id"])
        header["flow_title"] = fixture.flow.title
        summary = summarize_run(header, self.engine.runs.events(run["run_id"]))
        return {"view": view, "summary": summary, "fixture": fixture, "flow_id": deployed["flow_id"]}

    def stop(self) -> None:
        for server in self._servers:
            server.stop()
        self.engine.stop()
        self.compute_agent.stop()
        self.transfer_agent.shutdown_abrupt()
