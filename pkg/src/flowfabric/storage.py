"""Durable on-disk primitives: fsynced append-only logs and atomic writes.

Crash tolerance contract: a record is committed once append() returns.
A torn final line (crash mid-write) is ignored on read; a malformed
record anywhere else means real corruption and is fail-stop.
"""
from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Any, Iterator

from .errors import FabricError


class CorruptJournal(FabricError):
    code = "CorruptJournal"


class NdjsonLog:
    """Append-only newline-delimited JSON log, fsynced per record."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._fh = open(self.path, "ab")

    def append(self, record: dict[str, Any]) -> None:
        line = json.dumps(record, separators=(",", ":"), ensure_ascii=False).encode("utf-8") + b"\n"
        with self._lock:
            self._fh.write(line)
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        with self._lock:
            try:
                self._fh.close()
            except OSError:
                pass


def read_ndjson(path: Path) -> list[dict[str, Any]]:
    """Read committed records; tolerate a torn tail, fail-stop otherwise."""
    path = Path(path)
    if not path.exists():
        return []
    records: list[dict[str, Any]] = []
    raw = path.read_bytes()
    if not raw:
        return []
    lines = raw.split(b"\n")
    # A committed file ends with a newline, so the final split element is
    # empty; anything else is a torn tail from a crash mid-append.
    tail = lines.pop() if lines else b""
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line.decode("utf-8")))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CorruptJournal(f"{path}: bad record at line {i + 1}: {exc}") from None
    if tail.strip():
        try:
            records.append(json.loads(tail.decode("utf-8")))
        except (json.JSONDecodeError, UnicodeDecodeError):
            pass  # torn tail: the record never committed
    return records


def iter_ndjson(path: Path) -> Iterator[dict[str, Any]]:
    yield from read_ndjson(path)


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_json(path: Path, doc: Any) -> None:
    atomic_write_bytes(path, json.dumps(doc, separators=(",", ":"), ensure_ascii=False).encode("utf-8"))


def read_json(path: Path, default: Any = None) -> Any:
    path = Path(path)
    if not path.exists():
        return default
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError:
        return default
