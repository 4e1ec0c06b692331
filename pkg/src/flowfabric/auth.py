"""Token-based identity: principals, scoped bearer tokens, delegation.

Static bearer tokens stand in for a full OAuth deployment. Tokens live
in a JSON credentials file; every service route names a required scope
and calls :meth:`TokenStore.check`. A scope grant of ``prefix:*``
matches any ``prefix:...`` scope. Secrets are compared constant-time.
"""
from __future__ import annotations

import hmac
import json
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import Unauthorized


@dataclass(frozen=True)
class Principal:
    principal_id: str
    display_name: str = ""
    kind: str = "human"  # human | service


@dataclass(frozen=True)
class Token:
    secret: str
    principal_id: str
    scopes: tuple[str, ...]
    expires_at: float | None = None  # epoch seconds; None = no expiry

    def expired(self, now: float | None = None) -> bool:
        return self.expires_at is not None and (now if now is not None else time.time()) >= self.expires_at


@dataclass(frozen=True)
class AuthContext:
    """An authenticated caller: resolved principal plus granted scopes."""
    principal: Principal
    scopes: tuple[str, ...]

    def allows(self, required: str) -> bool:
        return any(scope_matches(granted, required) for granted in self.scopes)


def scope_matches(granted: str, required: str) -> bool:
    if granted == required or granted == "*":
        return True
    if granted.endswith(":*"):
        return required.startswith(granted[:-1])  # keep the trailing ':'
    return False


class TokenStore:
    """Read-mostly store of principals and tokens; mints and revocations
    are serialized. Optionally persisted to a credentials file."""

    def __init__(self, path: Path | None = None):
        self._lock = threading.Lock()
        self._principals: dict[str, Principal] = {}
        self._tokens: dict[str, Token] = {}
        self._path = Path(path) if path else None
        self._loaded_mtime: float | None = None
        if self._path and self._path.exists():
            self._load()

    # -- persistence ---------------------------------------------------------

    def _load(self) -> None:
        try:
            stat = self._path.stat()
            doc = json.loads(self._path.read_text())
        except (OSError, json.JSONDecodeError):
            return
        self._principals.clear()
        self._tokens.clear()
        for p in doc.get("principals", []):
            self._principals[p["principal_id"]] = Principal(p["principal_id"], p.get("display_name", ""), p.get("kind", "human"))
        for t in doc.get("tokens", []):
            self._tokens[t["secret"]] = Token(t["secret"], t["principal_id"], tuple(t["scopes"]), t.get("expires_at"))
        self._loaded_mtime = stat.st_mtime

    def _refresh(self) -> None:
        """The credentials file is the cross-process source of truth: pick up
        tokens minted or revoked by other processes."""
        if self._path is None:
            return
        try:
            mtime = self._path.stat().st_mtime
        except OSError:
            return
        if mtime != self._loaded_mtime:
            self._load()

    def _save(self) -> None:
        if not self._path:
            return
        doc = {
            "principals": [vars(p) for p in self._principals.values()],
            "tokens": [
                {"secret": t.secret, "principal_id": t.principal_id, "scopes": list(t.scopes), "expires_at": t.expires_at}
                for t in self._tokens.values()
            ],
        }
        tmp = self._path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=2))
        tmp.replace(self._path)
        try:
            self._loaded_mtime = self._path.stat().st_mtime
        except OSError:
            pass

    # -- management ----------------------------------------------------------

    def add_principal(self, principal_id: str, display_name: str = "", kind: str = "human") -> Principal:
        with self._lock:
            if principal_id in self._principals:
                raise Unauthorized(f"principal {principal_id} already exists")
            p = Principal(principal_id, display_name, kind)
            self._principals[principal_id] = p
            self._save()
            return p

    def ensure_principal(self, principal_id: str, kind: str = "human") -> Principal:
        with self._lock:
            p = self._principals.get(principal_id)
            if p is None:
                p = Principal(principal_id, principal_id, kind)
                self._principals[principal_id] = p
                self._save()
            return p

    def mint_token(self, principal_id: str, scopes: list[str] | tuple[str, ...],
                   ttl_s: float | None = None, secret: str | None = None) -> Token:
        with self._lock:
            if principal_id not in self._principals:
                raise Unauthorized(f"unknown principal {principal_id}")
            token = Token(
                secret=secret or secrets.token_urlsafe(24),
                principal_id=principal_id,
                scopes=tuple(scopes),
                expires_at=(time.time() + ttl_s) if ttl_s else None,
            )
            self._tokens[token.secret] = token
            self._save()
            return token

    def revoke(self, secret: str) -> bool:
        with self._lock:
            found = self._tokens.pop(secret, None)
            self._save()
            return found is not None

    # -- checking ------------------------------------------------------------

    def check(self, secret: str | None, required_scope: str | None) -> AuthContext:
        """Resolve a bearer secret and enforce a scope. Raises Unauthorized
        on unknown/expired tokens or missing scope."""
        if not secret:
            raise Unauthorized("missing bearer token")
        with self._lock:
            self._refresh()
            candidates = list(self._tokens.items())
        token = None
        for candidate, tok in candidates:
            if hmac.compare_digest(candidate, secret):
                token = tok
                break
        if token is None:
            raise Unauthorized("unknown token")
        if token.expired():
            raise Unauthorized("token expired")
        principal = self._principals.get(token.principal_id)
        if principal is None:
            raise Unauthorized("token principal vanished")
        ctx = AuthContext(principal=principal, scopes=token.scopes)
        if required_scope is not None and not ctx.allows(required_scope):
            raise Unauthorized(f"scope {required_scope} required", detail={"required": required_scope})
        return ctx

    def delegate(self, ctx: AuthContext, drop_prefixes: tuple[str, ...] = ("flows:",),
                 ttl_s: float | None = None) -> Token:
        """Mint a run-scoped token acting as ``ctx.principal``: same grants
        minus orchestration scopes, so providers attribute work to the
        initiating user."""
        scopes = tuple(s for s in ctx.scopes if not any(s.startswith(p) for p in drop_prefixes))
        return self.mint_token(ctx.principal.principal_id, scopes, ttl_s=ttl_s)


@dataclass
class AuditLog:
    """Per-provider audit trail: who did what to which action."""
    records: list[dict] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, principal_id: str, op: str, action_id: str | None = None) -> None:
        with self._lock:
            self.records.append({"ts": time.time(), "principal": principal_id, "op": op, "action_id": action_id})

    def by_principal(self, principal_id: str) -> list[dict]:
        with self._lock:
            return [r for r in self.records if r["principal"] == principal_id]
