"""Clients for the flows service: one over HTTP, one over an in-process
engine. Both expose the same call surface so the trigger daemon, the CLI,
and the fixtures driver don't care how the service is deployed.
"""
from __future__ import annotations

import time
from typing import Any

from .auth import TokenStore
from .engine import Engine
from .errors import FabricError, error_from_body
from .protocol import ProviderUnreachable


class HttpServiceClient:
    def __init__(self, base_url: str, token: str, timeout_s: float = 30.0):
        import requests

        self.base_url = base_url.rstrip("/")
        self.token = token
        self.timeout_s = timeout_s
        self._session = requests.Session()

    def _call(self, method: str, path: str, body: dict | None = None,
              params: dict | None = None) -> Any:
        import requests

        try:
            resp = self._session.request(method, self.base_url + path, json=body, params=params,
                                         headers={"Authorization": f"Bearer {self.token}"},
                                         timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise ProviderUnreachable(f"flows service: {exc}") from None
        if resp.status_code >= 400:
            try:
                payload = resp.json()
            except ValueError:
                payload = {}
            raise error_from_body(resp.status_code, payload)
        return resp.json()

    def deploy_flow(self, definition: dict) -> dict:
        return self._call("POST", "/flows", definition)

    def list_flows(self) -> list[dict]:
        return self._call("GET", "/flows")["flows"]

    def start_run(self, flow_id: str, input_doc: dict, run_key: str | None = None) -> dict:
        return self._call("POST", f"/flows/{flow_id}/run", {"input": input_doc, "run_key": run_key})

    def get_run(self, run_id: str) -> dict:
        return self._call("GET", f"/runs/{run_id}")

    def get_events(self, run_id: str, after_seq: int = 0) -> list[dict]:
        return self._call("GET", f"/runs/{run_id}/events", params={"after_seq": after_seq})["events"]

    def list_runs(self, **filters) -> dict:
        return self._call("GET", "/runs", params={k: v for k, v in filters.items() if v is not None})

    def cancel_run(self, run_id: str) -> dict:
        return self._call("POST", f"/runs/{run_id}/cancel")


class LocalServiceClient:
    """Same surface, directly against an Engine (single-process mode)."""

    def __init__(self, engine: Engine, tokens: TokenStore, token: str):
        self.engine = engine
        self._ctx = tokens.check(token, None)

    def deploy_flow(self, definition: dict) -> dict:
        return self.engine.deploy_flow(self._ctx, definition)

    def list_flows(self) -> list[dict]:
        return self.engine.list_flows(self._ctx)

    def start_run(self, flow_id: str, input_doc: dict, run_key: str | None = None) -> dict:
        return self.engine.start_run(self._ctx, flow_id, input_doc, run_key=run_key)

    def get_run(self, run_id: str) -> dict:
        return self.engine.get_run(self._ctx, run_id)

    def get_events(self, run_id: str, after_seq: int = 0) -> list[dict]:
        events = self.engine.get_events(self._ctx, run_id)
        return [e for e in events if e["seq"] > after_seq] if after_seq else events

    def list_runs(self, **filters) -> dict:
        return self.engine.list_runs(self._ctx, **filters)

    def cancel_run(self, run_id: str) -> dict:
        return self.engine.cancel_run(self._ctx, run_id)


def wait_for_run(client, run_id: str, timeout_s: float = 300.0, poll_s: float = 0.05) -> dict:
    """Poll until a run reaches a terminal status."""
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        view = client.get_run(run_id)
        if view["status"] != "ACTIVE":
            return view
        time.sleep(poll_s)
    raise FabricError(f"run {run_id} still ACTIVE after {timeout_s}s")
