"""Transfer action provider and transfer endpoint agents.

Agents expose collection roots for chunked reads and resumable write
sessions. A transfer is executed by the destination agent pulling from
the source agent in fixed-size chunks (4 MiB default, parallel
prefetch, in-order apply); every chunk carries a SHA-256 digest and the
whole file is verified again at commit, which is an fsync + atomic
rename so a partially transferred file is never visible at its final
path. Write sessions are keyed by a caller-chosen session_key and
persist a fsynced progress watermark, so a killed and restarted agent
resumes from the last durable byte.
"""
from __future__ import annotations

import hashlib
import os
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .auth import TokenStore
from .errors import Conflict, FabricError, NotFound, SchemaViolation, ValidationFailed
from .protocol import (ACTIVE, FAILED, SUCCEEDED, ActionRecord, BaseProvider,
                       ProviderDescriptor, ProviderUnreachable)
from .storage import atomic_write_json, read_json

CHUNK_SIZE = 4 * 1024 * 1024
PARTIAL_DIR = ".ff-partial"


class PathEscapesRoot(SchemaViolation):
    code = "PathEscapesRoot"


class RangeBeyondEOF(SchemaViolation):
    code = "RangeBeyondEOF"


class SourceMissing(NotFound):
    code = "SourceMissing"


class BadRoot(ValidationFailed):
    code = "BadRoot"


class AgentUnreachable(ProviderUnreachable):
    code = "AgentUnreachable"


class ChecksumMismatch(FabricError):
    code = "ChecksumMismatch"


class UnknownSession(NotFound):
    code = "UnknownSession"


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1024 * 1024), b""):
            h.update(block)
    return h.hexdigest()


def safe_join(root: Path, rel: str) -> Path:
    """Resolve a collection-relative path, refusing root escapes."""
    if rel.startswith("/") or rel.split("/")[0] == "..":
        raise PathEscapesRoot(f"path {rel!r} escapes collection root")
    candidate = (root / rel).resolve()
    root_resolved = root.resolve()
    if candidate != root_resolved and root_resolved not in candidate.parents:
        raise PathEscapesRoot(f"path {rel!r} escapes collection root")
    return candidate


@dataclass
class WriteSession:
    session_id: str
    session_key: str
    root: Path
    rel_path: str
    total_bytes: int
    part_path: Path
    meta_path: Path
    source: dict[str, Any] | None = None
    bytes_received: int = 0
    state: str = "open"  # open | pulling | stalled | complete | committed | aborted
    error: str | None = None
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)
    cancel: threading.Event = field(default_factory=threading.Event, repr=False)
    pull_thread: threading.Thread | None = field(default=None, repr=False)

    def to_wire(self) -> dict[str, Any]:
        with self.lock:
            return {"session_id": self.session_id, "path": self.rel_path,
                    "bytes_received": self.bytes_received, "total_bytes": self.total_bytes,
                    "state": self.state, "error": self.error}


class TransferAgent:
    """Serves one or more exported roots for reads and resumable writes."""

    def __init__(self, exports: list[Path], peer_resolver: Callable[[str], Any] | None = None,
                 chunk_size: int = CHUNK_SIZE, pull_streams: int = 4,
                 peer_token: str | None = None):
        self.exports = [Path(p).resolve() for p in exports]
        for root in self.exports:
            if not root.is_dir():
                raise BadRoot(f"export root {root} is not a directory")
        self.chunk_size = chunk_size
        self.pull_streams = pull_streams
        self.peer_token = peer_token
        self.peer_resolver = peer_resolver or (lambda url: TransferAgentClient(url, token=self.peer_token))
        self._sessions: dict[str, WriteSession] = {}
        self._lock = threading.Lock()

    def _root(self, root: str) -> Path:
        resolved = Path(root).resolve()
        for export in self.exports:
            if resolved == export:
                return export
        raise BadRoot(f"root {root} is not exported by this agent")

    # -- reads ------------------------------------------------------------------

    def stat(self, root: str, path: str, want_digest: bool = False) -> dict[str, Any]:
        base = self._root(root)
        target = safe_join(base, path) if path not in ("", ".") else base
        if not target.exists():
            return {"exists": False}
        if target.is_dir():
            files = []
            for p in sorted(target.rglob("*")):
                if p.is_file() and PARTIAL_DIR not in p.parts:
                    files.append({"path": str(p.relative_to(target)), "size": p.stat().st_size})
            return {"exists": True, "is_dir": True, "files": files}
        info: dict[str, Any] = {"exists": True, "is_dir": False, "size": target.stat().st_size}
        if want_digest:
            info["sha256"] = file_sha256(target)
        return info

    def read_chunk(self, root: str, path: str, offset: int, length: int) -> tuple[bytes, str, int, bool]:
        base = self._root(root)
        target = safe_join(base, path)
        if not target.is_file():
            raise SourceMissing(f"no file {path!r} in collection")
        size = target.stat().st_size
        if offset > size:
            raise RangeBeyondEOF(f"offset {offset} beyond EOF {size}")
        if offset == size:
            return b"", hashlib.sha256(b"").hexdigest(), size, True
        with open(target, "rb") as fh:
            fh.seek(offset)
            data = fh.read(length)
        return data, hashlib.sha256(data).hexdigest(), size, offset + len(data) >= size

    # -- write sessions ------------------------------------------------------------

    @staticmethod
    def _session_id(session_key: str) -> str:
        return "ws-" + hashlib.sha256(session_key.encode()).hexdigest()[:16]

    def open_session(self, session_key: str, root: str, path: str, total_bytes: int,
                     source: dict[str, Any] | None = None, chunk_size: int | None = None) -> dict[str, Any]:
        if not session_key:
            raise SchemaViolation("session_key required")
        base = self._root(root)
        final = safe_join(base, path)  # validates
        sid = self._session_id(session_key)
        partial_dir = base / PARTIAL_DIR
        partial_dir.mkdir(exist_ok=True)
        with self._lock:
            session = self._sessions.get(sid)
            if session is None:
                for other in self._sessions.values():
                    if (other.rel_path == path and str(other.root) == str(base)
                            and other.session_key != session_key
                            and other.state in ("open", "pulling", "stalled", "complete")):
                        raise Conflict(f"another session is writing {path!r}")
                session = WriteSession(
                    session_id=sid, session_key=session_key, root=base, rel_path=path,
                    total_bytes=int(total_bytes),
                    part_path=partial_dir / f"{sid}.part",
                    meta_path=partial_dir / f"{sid}.json",
                    source=source,
                )
                self._recover_progress(session)
                self._sessions[sid] = session
                if source and session.state in ("open", "stalled") and session.bytes_received < session.total_bytes:
                    self._start_puller(session, chunk_size or self.chunk_size)
                elif session.bytes_received >= session.total_bytes and session.state not in ("committed", "aborted"):
                    session.state = "complete"
            else:
                with session.lock:
                    if session.state == "stalled" and source:
                        session.source = source
                        self._start_puller(session, chunk_size or self.chunk_size)
        _ = final
        return session.to_wire()

    def _recover_progress(self, session: WriteSession) -> None:
        meta = read_json(session.meta_path)
        if meta and session.part_path.exists():
            watermark = int(meta.get("bytes", 0))
            with open(session.part_path, "ab") as fh:
                fh.truncate(watermark)
            session.bytes_received = watermark
        else:
            session.part_path.write_bytes(b"")
            self._save_progress(session)
        if session.bytes_received >= session.total_bytes:
            session.state = "complete"

    def _save_progress(self, session: WriteSession) -> None:
        atomic_write_json(session.meta_path, {
            "bytes": session.bytes_received, "path": session.rel_path,
            "total_bytes": session.total_bytes, "session_key": session.session_key,
        })

    def _append(self, session: WriteSession, offset: int, data: bytes, chunk_sha: str | None) -> dict[str, Any]:
        with session.lock:
            if session.state in ("committed", "aborted"):
                raise Conflict(f"session {session.session_id} is {session.state}")
            if offset != session.bytes_received:
                raise Conflict(f"expected offset {session.bytes_received}, got {offset}")
            if chunk_sha and hashlib.sha256(data).hexdigest() != chunk_sha:
                raise ChecksumMismatch("chunk digest mismatch")
            with open(session.part_path, "ab") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            session.bytes_received += len(data)
            self._save_progress(session)
            if session.bytes_received >= session.total_bytes:
                session.state = "complete"
            return session.to_wire()

    def put_chunk(self, session_id: str, offset: int, data: bytes, chunk_sha: str | None = None) -> dict[str, Any]:
        return self._append(self._session(session_id), offset, data, chunk_sha)

    def session_status(self, session_id: str) -> dict[str, Any]:
        return self._session(session_id).to_wire()

    def commit(self, session_id: str, sha256: str) -> dict[str, Any]:
        session = self._session(session_id)
        with session.lock:
            if session.state == "committed":
                return session.to_wire()  # idempotent commit
            if session.bytes_received != session.total_bytes:
                raise Conflict(f"session has {session.bytes_received}/{session.total_bytes} bytes")
            actual = file_sha256(session.part_path)
            if sha256 and actual != sha256:
                # corrupt staging data: reset so a retry starts clean
                session.part_path.write_bytes(b"")
                session.bytes_received = 0
                session.state = "open"
                self._save_progress(session)
                raise ChecksumMismatch(f"expected {sha256}, staged {actual}")
            final = safe_join(session.root, session.rel_path)
            final.parent.mkdir(parents=True, exist_ok=True)
            with open(session.part_path, "rb") as fh:
                os.fsync(fh.fileno())
            os.replace(session.part_path, final)
            session.meta_path.unlink(missing_ok=True)
            session.state = "committed"
            return {**session.to_wire(), "sha256": actual}

    def abort(self, session_id: str) -> dict[str, Any]:
        session = self._session(session_id)
        with session.lock:
            session.cancel.set()
            session.state = "aborted"
            session.part_path.unlink(missing_ok=True)
            session.meta_path.unlink(missing_ok=True)
        return session.to_wire()

    def _session(self, session_id: str) -> WriteSession:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise UnknownSession(f"no write session {session_id} (agent restarted?)")
        return session

    # -- pull mode ----------------------------------------------------------------

    def _start_puller(self, session: WriteSession, chunk_size: int) -> None:
        session.state = "pulling"
        thread = threading.Thread(target=self._pull, args=(session, chunk_size),
                                  name=f"pull-{session.session_id}", daemon=True)
        session.pull_thread = thread
        thread.start()

    def shutdown_abrupt(self) -> None:
        """Halt pull workers and stop serving; disk state stays exactly as it
        is, as when the agent process dies. A fresh agent over the same roots
        resumes sessions from their durable watermarks."""
        with self._lock:
            sessions = list(self._sessions.values())
        for session in sessions:
            session.cancel.set()
        for session in sessions:
            if session.pull_thread is not None:
                session.pull_thread.join(timeout=5)
        with self._lock:
            self._sessions.clear()

    def _pull(self, session: WriteSession, chunk_size: int) -> None:
        src = session.source or {}
        try:
            peer = self.peer_resolver(src["agent_url"])
            offsets = list(range(session.bytes_received, session.total_bytes, chunk_size))
            with ThreadPoolExecutor(max_workers=self.pull_streams) as pool:
                in_flight: dict[int, Any] = {}
                next_submit = 0
                for i, offset in enumerate(offsets):
                    while next_submit < len(offsets) and next_submit < i + self.pull_streams:
                        o = offsets[next_submit]
                        in_flight[o] = pool.submit(self._fetch_chunk, peer, src, o, chunk_size, session)
                        next_submit += 1
                    if session.cancel.is_set():
                        return
                    data, sha = in_flight.pop(offset).result()
                    self._append(session, offset, data, sha)
            with session.lock:
                if session.state == "pulling":
                    session.state = "complete" if session.bytes_received >= session.total_bytes else "stalled"
        except Exception as exc:
            with session.lock:
                if session.state == "pulling":
                    session.state = "stalled"
                    session.error = f"{type(exc).__name__}: {exc}"

    @staticmethod
    def _fetch_chunk(peer, src: dict[str, Any], offset: int, length: int, session: WriteSession):
        last: Exception | None = None
        for attempt in range(3):
            if session.cancel.is_set():
                raise FabricError("session canceled")
            try:
                data, sha, _size, _eof = peer.read_chunk(src["root"], src["path"], offset, length)
                if hashlib.sha256(data).hexdigest() != sha:
                    raise ChecksumMismatch(f"chunk at {offset} corrupt in flight")
                return data, sha
            except (FabricError, OSError) as exc:
                last = exc
                time.sleep(0.1 * (attempt + 1))
        raise last if last else FabricError("chunk fetch failed")


class TransferAgentClient:
    """HTTP handle for a remote agent."""

    def __init__(self, base_url: str, token: str | None = None, timeout_s: float = 60.0):
        import requests

        self.base_url = base_url.rstrip("/")
        self.token = token
        self.timeout_s = timeout_s
        self._session = requests.Session()

    def _headers(self) -> dict[str, str]:
        return {"Authorization": f"Bearer {self.token}"} if self.token else {}

    def _raise(self, resp) -> None:
        if resp.status_code >= 400:
            from .errors import error_from_body

            try:
                body = resp.json()
            except ValueError:
                body = {}
            raise error_from_body(resp.status_code, body)

    def _json(self, method: str, path: str, body: dict | None = None, params: dict | None = None):
        import requests

        try:
            resp = self._session.request(method, self.base_url + path, json=body, params=params,
                                         headers=self._headers(), timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise AgentUnreachable(f"{self.base_url}: {exc}") from None
        self._raise(resp)
        return resp.json()

    def stat(self, root: str, path: str, want_digest: bool = False) -> dict[str, Any]:
        return self._json("GET", "/stat", params={"root": root, "path": path, "digest": "1" if want_digest else "0"})

    def read_chunk(self, root: str, path: str, offset: int, length: int):
        import requests

        try:
            resp = self._session.get(self.base_url + "/read",
                                     params={"root": root, "path": path, "offset": offset, "len": length},
                                     headers=self._headers(), timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise AgentUnreachable(f"{self.base_url}: {exc}") from None
        self._raise(resp)
        return (resp.content, resp.headers.get("X-Chunk-Sha256", ""),
                int(resp.headers.get("X-File-Size", "0")), resp.headers.get("X-Eof") == "1")

    def open_session(self, session_key: str, root: str, path: str, total_bytes: int,
                     source: dict | None = None, chunk_size: int | None = None) -> dict[str, Any]:
        return self._json("POST", "/write-session", body={
            "session_key": session_key, "root": root, "path": path,
            "total_bytes": total_bytes, "source": source, "chunk_size": chunk_size,
        })

    def session_status(self, session_id: str) -> dict[str, Any]:
        return self._json("GET", f"/write-session/{session_id}")

    def put_chunk(self, session_id: str, offset: int, data: bytes, chunk_sha: str | None = None) -> dict[str, Any]:
        import requests

        headers = self._headers()
        if chunk_sha:
            headers["X-Chunk-Sha256"] = chunk_sha
        try:
            resp = self._session.put(f"{self.base_url}/write-session/{session_id}/chunk",
                                     params={"offset": offset}, data=data, headers=headers,
                                     timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise AgentUnreachable(f"{self.base_url}: {exc}") from None
        self._raise(resp)
        return resp.json()

    def commit(self, session_id: str, sha256: str) -> dict[str, Any]:
        return self._json("POST", f"/write-session/{session_id}/commit", body={"sha256": sha256})

    def abort(self, session_id: str) -> dict[str, Any]:
        return self._json("POST", f"/write-session/{session_id}/abort")


@dataclass
class Collection:
    collection_id: str
    agent: Any  # TransferAgent or TransferAgentClient
    agent_url: str
    root: str
    display_name: str


class TransferProvider(BaseProvider):
    kind = "transfer"

    def __init__(self, token_store: TokenStore, poll_s: float = 0.02,
                 retry_delays: tuple[float, ...] = (0.2, 0.5, 1.0, 2.0, 4.0)):
        super().__init__(token_store)
        self._collections: dict[str, Collection] = {}
        self._reg_lock = threading.Lock()
        self.poll_s = poll_s
        self.retry_delays = retry_delays

    # -- registry -------------------------------------------------------------------

    def register_collection(self, agent, agent_url: str, root: str, name: str,
                            collection_id: str | None = None) -> str:
        try:
            info = agent.stat(root, ".")
        except (AgentUnreachable, ProviderUnreachable):
            raise AgentUnreachable(f"agent {agent_url} unreachable") from None
        except BadRoot:
            raise
        if not info.get("exists") or not info.get("is_dir"):
            raise BadRoot(f"{root} does not exist on agent {agent_url}")
        collection_id = collection_id or f"col-{uuid.uuid4().hex[:12]}"
        with self._reg_lock:
            if collection_id in self._collections:
                raise Conflict(f"collection {collection_id} exists")
            self._collections[collection_id] = Collection(collection_id, agent, agent_url, root, name)
        return collection_id

    def list_collections(self) -> list[dict[str, Any]]:
        return [{"collection_id": c.collection_id, "agent_url": c.agent_url,
                 "root": c.root, "display_name": c.display_name}
                for c in self._collections.values()]

    def get_collection(self, collection_id: str) -> Collection:
        col = self._collections.get(collection_id)
        if col is None:
            raise NotFound(f"no collection {collection_id}")
        return col

    # -- protocol hooks ----------------------------------------------------------------

    def descriptor(self) -> ProviderDescriptor:
        return ProviderDescriptor(
            title="Transfer action provider",
            kind="transfer",
            input_schema={
                "required": ["source_collection", "destination_collection", "source_path", "destination_path"],
                "properties": {
                    "source_collection": {"type": "string"},
                    "destination_collection": {"type": "string"},
                    "source_path": {"type": "string"},
                    "destination_path": {"type": "string"},
                    "recursive": {"type": "boolean"},
                },
            },
            scopes=("transfer:<collection_id>",),
        )

    def validate_body(self, body: dict[str, Any]) -> None:
        for key in ("source_collection", "destination_collection", "source_path", "destination_path"):
            if not isinstance(body.get(key), str) or body[key] == "":
                raise SchemaViolation(f"transfer request needs string {key}")
        for key in ("source_path", "destination_path"):
            rel = body[key]
            if rel.startswith("/") or any(seg == ".." for seg in rel.split("/")):
                raise PathEscapesRoot(f"{key} {rel!r} must be a normalized collection-relative path")

    def required_scopes(self, body: dict[str, Any]) -> list[str]:
        return [f"transfer:{body['source_collection']}", f"transfer:{body['destination_collection']}"]

    def start(self, record: ActionRecord) -> None:
        # Fail fast on unknown collections; the copy itself is async.
        self.get_collection(record.body["source_collection"])
        self.get_collection(record.body["destination_collection"])
        threading.Thread(target=self._transfer, args=(record,),
                         name=f"transfer-{record.action_id}", daemon=True).start()

    def stop(self, record: ActionRecord) -> None:
        record.cancel_event.set()

    # -- execution ------------------------------------------------------------------------

    def _transfer(self, record: ActionRecord) -> None:
        body = record.body
        started = time.monotonic()
        sessions_opened: list[tuple[Any, str]] = []
        try:
            src_col = self.get_collection(body["source_collection"])
            dst_col = self.get_collection(body["destination_collection"])
            plan = self._plan(src_col, body["source_path"], body.get("recursive", False))
            total_bytes = 0
            wire_started = time.monotonic()
            for src_rel, dst_rel in plan:
                if record.cancel_event.is_set():
                    raise _canceled()
                moved = self._copy_file(record, src_col, dst_col, src_rel, dst_rel, sessions_opened)
                total_bytes += moved
            wire_s = time.monotonic() - wire_started
            with record.lock:
                if record.status == ACTIVE:
                    self._complete(record, SUCCEEDED,
                                   {"bytes_moved": total_bytes, "files_moved": len(plan),
                                    "wire_s": round(wire_s, 6)},
                                   runtime_s=time.monotonic() - started, queue_wait_s=0.0)
        except FabricError as exc:
            self._cleanup_sessions(sessions_opened)
            with record.lock:
                if record.status == ACTIVE:
                    self._complete(record, FAILED, {"code": exc.code, "message": exc.message, **exc.detail},
                                   runtime_s=time.monotonic() - started, queue_wait_s=0.0)
        except Exception as exc:  # pragma: no cover - defensive
            self._cleanup_sessions(sessions_opened)
            with record.lock:
                if record.status == ACTIVE:
                    self._complete(record, FAILED, {"code": "Internal", "message": repr(exc)},
                                   runtime_s=time.monotonic() - started, queue_wait_s=0.0)

    def _plan(self, src_col: Collection, source_path: str, recursive: bool) -> list[tuple[str, str]]:
        info = self._with_retries(lambda: src_col.agent.stat(src_col.root, source_path))
        if not info.get("exists"):
            raise SourceMissing(f"source {source_path!r} not found")
        if info.get("is_dir"):
            if not recursive:
                raise SchemaViolation(f"source {source_path!r} is a directory; set recursive")
            return [(f"{source_path}/{f['path']}".lstrip("/"), f["path"]) for f in info["files"]]
        return [(source_path, "")]

    def _copy_file(self, record: ActionRecord, src_col: Collection, dst_col: Collection,
                   src_rel: str, dst_sub: str, sessions_opened: list) -> int:
        body = record.body
        dst_rel = body["destination_path"] if not dst_sub else f"{body['destination_path']}/{dst_sub}"
        stat = self._with_retries(lambda: src_col.agent.stat(src_col.root, src_rel, True))
        if not stat.get("exists") or stat.get("is_dir"):
            raise SourceMissing(f"source file {src_rel!r} not found")
        size, digest = int(stat["size"]), stat["sha256"]
        session_key = f"{record.action_id}:{dst_rel}"
        source_ref = {"agent_url": src_col.agent_url, "root": src_col.root, "path": src_rel}

        def reopen():
            return dst_col.agent.open_session(session_key, dst_col.root, dst_rel, size,
                                              source=source_ref)

        for checksum_round in range(2):
            session = self._with_retries(reopen)
            sessions_opened.append((dst_col.agent, session["session_id"]))
            sid = session["session_id"]
            mismatch = False
            while True:
                if record.cancel_event.is_set():
                    raise _canceled()
                st = self._with_retries(lambda: dst_col.agent.session_status(sid), reopen=reopen)
                if st["state"] == "complete":
                    try:
                        committed = self._with_retries(lambda: dst_col.agent.commit(sid, digest),
                                                       reopen=reopen)
                    except ChecksumMismatch:
                        if checksum_round == 1:
                            raise
                        mismatch = True
                        break  # agent reset the session; one clean re-pull
                    except Conflict:
                        # an agent restart mid-commit resumed the session with
                        # fewer bytes; fall back to polling the re-pull
                        self._with_retries(reopen)
                        self._sleep_with_cancel(record, self.poll_s)
                        continue
                    if committed.get("state") == "committed":
                        return size
                elif st["state"] == "stalled":
                    # re-arm the puller from the current watermark
                    self._sleep_with_cancel(record, self.retry_delays[0])
                    self._with_retries(reopen)
                elif st["state"] == "aborted":
                    raise FabricError("session aborted underneath the transfer")
                self._sleep_with_cancel(record, self.poll_s)
            if not mismatch:
                break
        raise ChecksumMismatch(f"digest mismatch persists for {dst_rel!r}")

    def _with_retries(self, call, reopen=None):
        last: FabricError | None = None
        for i, delay in enumerate((0.0,) + self.retry_delays):
            if delay:
                time.sleep(delay)
            try:
                return call()
            except (AgentUnreachable, ProviderUnreachable, UnknownSession) as exc:
                last = exc
                if isinstance(exc, UnknownSession) and reopen is not None:
                    try:
                        reopen()
                    except FabricError as exc2:
                        last = exc2
                continue
        raise last if last else FabricError("retries exhausted")

    @staticmethod
    def _sleep_with_cancel(record: ActionRecord, duration: float) -> None:
        if record.cancel_event.wait(duration):
            raise _canceled()

    def _cleanup_sessions(self, sessions: list[tuple[Any, str]]) -> None:
        for agent, sid in sessions:
            try:
                agent.abort(sid)
            except FabricError:
                pass
            except Exception:
                pass


def _canceled() -> FabricError:
    exc = FabricError("transfer canceled")
    exc.code = "Canceled"
    return exc
