"""Metadata catalog provider: ingest documents under subjects, query with
conjunctive filters and facet counts.

One live version per (index, subject); re-ingest replaces atomically,
or shallow-merges when the request asks for merge (the aggregate-then-
update publication pattern). Persistence is a single append-only
segment file replayed at startup.
"""
from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .auth import TokenStore
from .errors import Conflict, NotFound, SchemaViolation, ValidationFailed
from .model import canonical_json, lookup_path
from .protocol import ActionRecord, BaseProvider, ProviderDescriptor, SUCCEEDED
from .storage import NdjsonLog, read_ndjson


class UnknownIndex(NotFound):
    code = "UnknownIndex"


class DuplicateName(Conflict):
    code = "DuplicateName"


class BadFilter(SchemaViolation):
    code = "BadFilter"


@dataclass
class SearchIndex:
    index_id: str
    display_name: str
    facet_fields: list[str]
    docs: dict[str, dict[str, Any]] = field(default_factory=dict)  # subject -> stored doc


class SearchProvider(BaseProvider):
    kind = "search"

    def __init__(self, token_store: TokenStore, data_dir: Path | None = None):
        super().__init__(token_store)
        self._indexes: dict[str, SearchIndex] = {}
        self._ingest_lock = threading.Lock()
        self._segment: NdjsonLog | None = None
        if data_dir is not None:
            path = Path(data_dir) / "segment.ndjson"
            for rec in read_ndjson(path):
                self._apply(rec)
            self._segment = NdjsonLog(path)

    # -- index management ----------------------------------------------------------

    def create_index(self, name: str, facet_fields: list[str] | None = None) -> str:
        if not name:
            raise SchemaViolation("index name must be non-empty")
        with self._ingest_lock:
            if any(ix.display_name == name for ix in self._indexes.values()):
                raise DuplicateName(f"index named {name!r} exists")
            rec = {"op": "create_index", "index_id": f"idx-{uuid.uuid4().hex[:12]}",
                   "display_name": name, "facet_fields": list(facet_fields or [])}
            self._apply(rec)
            if self._segment:
                self._segment.append(rec)
            return rec["index_id"]

    def list_indexes(self) -> list[dict[str, Any]]:
        return [{"index_id": ix.index_id, "display_name": ix.display_name,
                 "facet_fields": ix.facet_fields, "documents": len(ix.docs)}
                for ix in self._indexes.values()]

    def _index(self, index_id: str) -> SearchIndex:
        ix = self._indexes.get(index_id)
        if ix is None:
            raise UnknownIndex(f"no index {index_id}")
        return ix

    def _apply(self, rec: dict[str, Any]) -> None:
        if rec["op"] == "create_index":
            self._indexes[rec["index_id"]] = SearchIndex(rec["index_id"], rec["display_name"],
                                                         list(rec.get("facet_fields", [])))
        elif rec["op"] == "ingest":
            ix = self._indexes.get(rec["index_id"])
            if ix is None:
                return
            subject = rec["subject"]
            if rec.get("mode") == "merge" and subject in ix.docs:
                merged = dict(ix.docs[subject]["content"])
                merged.update(rec["content"])  # shallow: new fields win
                content = merged
            else:
                content = rec["content"]
            ix.docs[subject] = {"subject": subject, "content": content,
                                "visible_to": rec.get("visible_to", []),
                                "indexed_at": rec.get("indexed_at")}

    # -- ingest (action protocol) ------------------------------------------------------

    def descriptor(self) -> ProviderDescriptor:
        return ProviderDescriptor(
            title="Search catalog provider",
            kind="search",
            input_schema={
                "required": ["index_id", "subject", "content"],
                "properties": {
                    "index_id": {"type": "string"},
                    "subject": {"type": "string"},
                    "content": {"type": "object"},
                    "visible_to": {"type": "array"},
                    "mode": {"enum": ["replace", "merge"]},
                },
            },
            scopes=("search:<index_id>",),
        )

    def validate_body(self, body: dict[str, Any]) -> None:
        for key in ("index_id", "subject"):
            if not isinstance(body.get(key), str) or not body[key]:
                raise SchemaViolation(f"ingest needs string {key}")
        if not isinstance(body.get("content"), dict):
            raise SchemaViolation("ingest content must be an object")
        if body.get("mode", "replace") not in ("replace", "merge"):
            raise SchemaViolation("mode must be replace or merge")

    def required_scopes(self, body: dict[str, Any]) -> list[str]:
        return [f"search:{body['index_id']}"]

    def start(self, record: ActionRecord) -> None:
        body = record.body
        started = time.monotonic()
        self._index(body["index_id"])  # UnknownIndex before any mutation
        with self._ingest_lock:  # same-subject ingests serialize: last writer wins
            rec = {"op": "ingest", "index_id": body["index_id"], "subject": body["subject"],
                   "content": body["content"], "visible_to": body.get("visible_to", []),
                   "mode": body.get("mode", "replace"), "indexed_at": time.time()}
            self._apply(rec)
            if self._segment:
                self._segment.append(rec)
            version = 1  # one live version per (index, subject)
        self._complete(record, SUCCEEDED,
                       {"subject": body["subject"], "version": version},
                       runtime_s=time.monotonic() - started, queue_wait_s=0.0)

    # -- query ------------------------------------------------------------------------

    def get_by_subject(self, principal_id: str | None, index_id: str, subject: str) -> dict[str, Any]:
        ix = self._index(index_id)
        doc = ix.docs.get(subject)
        if doc is None or not self._visible(doc, principal_id):
            raise NotFound(f"no document for subject {subject!r}")
        return doc

    def query(self, principal_id: str | None, index_id: str, q: str = "",
              filters: list[tuple[str, str]] | None = None, facets: list[str] | None = None,
              limit: int = 50, offset: int = 0) -> dict[str, Any]:
        ix = self._index(index_id)
        filters = filters or []
        for f in filters:
            if len(f) != 2 or not f[0]:
                raise BadFilter(f"filter {f!r} must be (field, value)")
        matched = []
        for doc in ix.docs.values():
            if not self._visible(doc, principal_id):
                continue
            if not all(self._field_matches(doc["content"], fld, val) for fld, val in filters):
                continue
            score = self._score(doc["content"], q)
            if q and score == 0:
                continue
            matched.append((score, doc))
        matched.sort(key=lambda pair: (-pair[0], pair[1]["subject"]))
        facet_counts: dict[str, dict[str, int]] = {}
        for facet in (facets if facets is not None else ix.facet_fields):
            counts: dict[str, int] = {}
            for _score, doc in matched:
                value = self._field_value(doc["content"], facet)
                if value is None:
                    continue
                key = value if isinstance(value, str) else canonical_json(value)
                counts[key] = counts.get(key, 0) + 1
            facet_counts[facet] = dict(sorted(counts.items()))
        page = [doc for _score, doc in matched[offset:offset + limit]]
        return {"total": len(matched), "results": page, "facets": facet_counts,
                "limit": limit, "offset": offset}

    @staticmethod
    def _visible(doc: dict[str, Any], principal_id: str | None) -> bool:
        visible_to = doc.get("visible_to") or []
        return not visible_to or principal_id in visible_to

    @staticmethod
    def _field_value(content: dict[str, Any], field_path: str) -> Any:
        expr = field_path if field_path.startswith("$.") else "$." + field_path
        try:
            return lookup_path(content, expr)
        except (KeyError, ValidationFailed):
            return None

    @classmethod
    def _field_matches(cls, content: dict[str, Any], field_path: str, wanted: str) -> bool:
        value = cls._field_value(content, field_path)
        if value is None:
            return False
        text = value if isinstance(value, str) else canonical_json(value)
        return text == wanted

    @staticmethod
    def _score(content: dict[str, Any], q: str) -> int:
        if not q:
            return 0
        return canonical_json(content).lower().count(q.lower())
