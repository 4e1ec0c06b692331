"""Builtin stub functions for compute endpoints.

Science codes (correlation analysis, stills processing, structure
refinement, peak fitting, network training, image reconstruction) are
replaced by deterministic stand-ins: each sleeps a configurable duration
and emits schema-correct synthetic results derived from a digest of its
arguments, optionally writing real output files so downstream transfer
and ingest steps operate on actual bytes.

A stub callable receives (payload, args, cancel_event) and returns the
result document. Raising StubFailure marks the task FAILED.
"""
from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path
from typing import Any, Callable

from .errors import FabricError
from .model import canonical_json


class StubFailure(FabricError):
    code = "StubFailure"


class StubCanceled(FabricError):
    code = "Canceled"


def _digest(args: Any) -> str:
    return hashlib.sha256(canonical_json(args).encode()).hexdigest()


def _hold(payload: dict, args: dict, cancel: threading.Event) -> float:
    """Sleep for the configured duration; interruptible by cancel."""
    duration = float(args.get("duration_s", payload.get("duration_s", 0.0)))
    if duration > 0 and cancel.wait(duration):
        raise StubCanceled("stub interrupted")
    return duration


def sleep_stub(payload: dict, args: dict, cancel: threading.Event) -> dict[str, Any]:
    duration = _hold(payload, args, cancel)
    result = payload.get("result") or {}
    return {"slept_s": duration, **result}


def fail_stub(payload: dict, args: dict, cancel: threading.Event) -> dict[str, Any]:
    _hold(payload, args, cancel)
    raise StubFailure(payload.get("message", "stub failure requested"))


def echo_stub(payload: dict, args: dict, cancel: threading.Event) -> dict[str, Any]:
    _hold(payload, args, cancel)
    return {"args": args}


def _out_rel(args: dict) -> str:
    """Collection-relative output dir; output_scope isolates concurrent runs."""
    rel = args.get("output_rel", "")
    scope = args.get("output_scope")
    if scope is not None and scope != "":
        rel = f"{scope}/{rel}".strip("/") if rel else str(scope)
    return rel


def _outdir(args: dict) -> Path | None:
    root = args.get("output_root")
    if not root:
        return None
    out = Path(root) / _out_rel(args)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_products(out: Path | None, rel: str, names: list[str], seed: str) -> list[str]:
    """Write small deterministic files; return collection-relative paths."""
    written = []
    for name in names:
        blob = hashlib.sha256((seed + name).encode()).hexdigest().encode() * 8
        if out is not None:
            (out / name).write_bytes(blob)
        written.append(f"{rel}/{name}".lstrip("/"))
    return written


def science_stub(payload: dict, args: dict, cancel: threading.Event) -> dict[str, Any]:
    """Generic analysis stand-in.

    payload: {"stub": "science", "op": <name>, "duration_s": <default>}
    args:    op-specific; common keys: input_path, output_root (absolute),
             output_rel (collection-relative), duration_s (override),
             hits (explicit hit count for stills-style ops).
    """
    op = payload.get("op", "analyze")
    duration = _hold(payload, args, cancel)
    seed = _digest({"op": op, "args": {k: v for k, v in sorted(args.items()) if k != "duration_s"}})
    out = _outdir(args)
    rel = _out_rel(args)
    result: dict[str, Any] = {"op": op, "digest": seed[:16], "duration_s": duration, "dir": rel}

    if op in ("dials_stills", "midas_peaksearch"):
        hits = args.get("hits")
        if hits is None:
            hits = 200 + int(seed[:8], 16) % 800  # deterministic 200..999
        files = _write_products(out, rel, [f"hits-{seed[:8]}.json"], seed)
        result.update({"hits": int(hits), "files": files})
    elif op in ("boost_corr", "prime_refine", "midas_refine", "ptycho_recon"):
        files = _write_products(out, rel, [f"{op}-{seed[:8]}.dat", f"{op}-{seed[:8]}.json"], seed)
        result.update({"files": files, "g2_path": files[0] if op == "boost_corr" else None})
    elif op == "make_plots":
        files = _write_products(out, rel, [f"plot-{seed[:8]}.png", f"plot-{seed[:8]}.thumb.png"], seed)
        result.update({"plots": files})
    elif op == "train_model":
        files = _write_products(out, rel, [f"model-{seed[:8]}.pt"], seed)
        result.update({"model_path": files[0], "loss": int(seed[8:12], 16) / 65535.0})
    elif op in ("extract_metadata", "gather_metadata"):
        files = _write_products(out, rel, [f"{op}-{seed[:8]}.json"], seed)
        result.update({
            "files": files,
            "metadata": {"sample": args.get("sample", f"sample-{seed[:6]}"),
                         "source_digest": seed[:16],
                         "n_inputs": len(args.get("inputs", []) or [])},
        })
    elif op == "archive":
        files = _write_products(out, rel, [f"archive-{seed[:8]}.tar"], seed)
        result.update({"archive_path": files[0]})
    elif op == "histogram":
        files = _write_products(out, rel, [f"hist-{seed[:8]}.json"], seed)
        result.update({"files": files})
    elif op in ("confirm_inputs", "create_config", "acquire_nodes"):
        files = _write_products(out, rel, [f"{op}-{seed[:8]}.txt"], seed) if op == "create_config" else []
        result.update({"ok": True, "files": files})
    else:
        files = _write_products(out, rel, [f"{op}-{seed[:8]}.out"], seed)
        result.update({"files": files})
    return result


def counter_stub(payload: dict, args: dict, cancel: threading.Event) -> dict[str, Any]:
    """Counts executions in a side-effect file; used to prove exactly-once."""
    path = Path(args["counter_path"])
    _hold(payload, args, cancel)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps({"step": args.get("label", "?")}) + "\n")
        fh.flush()
    count = sum(1 for _ in open(path))
    return {"executions": count, "label": args.get("label", "?")}


BUILTIN_STUBS: dict[str, Callable[[dict, dict, threading.Event], dict[str, Any]]] = {
    "sleep": sleep_stub,
    "fail": fail_stub,
    "echo": echo_stub,
    "science": science_stub,
    "counter": counter_stub,
}
