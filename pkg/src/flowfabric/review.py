"""Human-in-the-loop review provider.

A review action parks INACTIVE with a prompt until an authorized
reviewer submits a verdict (approve/reject plus comment), which becomes
the action result the engine stores at the step's result_path. Exactly
one verdict wins under concurrent responses; the losers get
AlreadyDecided. Reviews never self-complete; an optional per-request
deadline fails the action with TimedOut.
"""
from __future__ import annotations

import time
from typing import Any

from .errors import Conflict, SchemaViolation, Unauthorized
from .protocol import (FAILED, INACTIVE, SUCCEEDED, ActionRecord,
                       BaseProvider, ProviderDescriptor)


class NotAReviewer(Unauthorized):
    code = "NotAReviewer"


class AlreadyDecided(Conflict):
    code = "AlreadyDecided"


class ReviewProvider(BaseProvider):
    kind = "review"

    def descriptor(self) -> ProviderDescriptor:
        return ProviderDescriptor(
            title="Review action provider",
            kind="review",
            input_schema={
                "required": ["prompt", "reviewers"],
                "properties": {
                    "prompt": {"type": "string"},
                    "reviewers": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                    "payload_refs": {"type": "array"},
                    "deadline_s": {"type": "number"},
                },
            },
            scopes=("review:request", "review:respond"),
        )

    def validate_body(self, body: dict[str, Any]) -> None:
        if not isinstance(body.get("prompt"), str) or not body["prompt"]:
            raise SchemaViolation("review request needs a prompt")
        reviewers = body.get("reviewers")
        if not isinstance(reviewers, list) or not reviewers or not all(isinstance(r, str) and r for r in reviewers):
            raise SchemaViolation("review request needs a non-empty reviewers list")
        if "deadline_s" in body and not isinstance(body["deadline_s"], (int, float)):
            raise SchemaViolation("deadline_s must be a number")

    def required_scopes(self, body: dict[str, Any]) -> list[str]:
        return ["review:request"]

    def start(self, record: ActionRecord) -> None:
        self._transition(record, INACTIVE)
        record.details = {
            "prompt": record.body["prompt"],
            "payload_refs": record.body.get("payload_refs", []),
            "reviewers": record.body["reviewers"],
            "requested_at": record.created_at,
        }

    def refresh(self, record: ActionRecord) -> None:
        deadline_s = record.body.get("deadline_s")
        if deadline_s is None:
            return
        with record.lock:
            if record.status == INACTIVE and time.time() - record.created_at >= float(deadline_s):
                self._complete(record, FAILED,
                               {"code": "TimedOut", "message": f"no verdict within {deadline_s}s"},
                               runtime_s=time.time() - record.created_at)

    # -- verdicts -----------------------------------------------------------------

    def respond(self, token: str | None, action_id: str, decision: str, comment: str = "") -> ActionRecord:
        ctx = self.tokens.check(token, "review:respond")
        record = self._get(action_id)
        if decision not in ("approve", "reject"):
            raise SchemaViolation(f"decision must be approve or reject, not {decision!r}")
        if ctx.principal.principal_id not in record.body.get("reviewers", []):
            raise NotAReviewer(f"{ctx.principal.principal_id} is not a reviewer for {action_id}")
        self.refresh(record)
        with record.lock:
            if record.status != INACTIVE:
                raise AlreadyDecided(
                    f"action {action_id} already {record.status}",
                    detail={"decided_by": record.details.get("decided_by"), "status": record.status})
            self._complete(record, SUCCEEDED, {
                "decision": decision,
                "comment": comment,
                "decided_by": ctx.principal.principal_id,
                "decided_at": time.time(),
            }, runtime_s=time.time() - record.created_at)
        self.audit.record(ctx.principal.principal_id, "respond", action_id)
        return record

    def list_pending(self, token: str | None) -> list[dict[str, Any]]:
        ctx = self.tokens.check(token, "review:respond")
        me = ctx.principal.principal_id
        pending = []
        with self._lock:
            records = list(self._actions.values())
        for record in records:
            self.refresh(record)
            with record.lock:
                if record.status == INACTIVE and me in record.body.get("reviewers", []):
                    pending.append({
                        "action_id": record.action_id,
                        "prompt": record.body["prompt"],
                        "payload_refs": record.body.get("payload_refs", []),
                        "reviewers": record.body["reviewers"],
                        "requested_at": record.created_at,
                    })
        pending.sort(key=lambda r: (r["requested_at"], r["action_id"]))
        return pending
