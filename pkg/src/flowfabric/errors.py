"""Error taxonomy shared by all services.

Every error carries a stable machine-readable ``code`` (enumerated in
docs/errors.md) plus a human message; HTTP layers map ``http_status``
onto the response and serialize ``to_body()`` as the payload.
"""
from __future__ import annotations

from typing import Any


_BY_CODE: dict[str, type["FabricError"]] = {}


class FabricError(Exception):
    code = "Internal"
    http_status = 500

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        _BY_CODE.setdefault(cls.code, cls)

    def __init__(self, message: str = "", *, detail: dict[str, Any] | None = None):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.detail = detail or {}

    def to_body(self) -> dict[str, Any]:
        return {"error": {"code": self.code, "message": self.message, "detail": self.detail}}


class ValidationFailed(FabricError):
    code = "ValidationFailed"
    http_status = 400


class Unauthorized(FabricError):
    code = "Unauthorized"
    http_status = 401


class NotFound(FabricError):
    code = "NotFound"
    http_status = 404


class Conflict(FabricError):
    code = "Conflict"
    http_status = 409


class SchemaViolation(FabricError):
    code = "SchemaViolation"
    http_status = 400


def error_from_body(status: int, body: dict[str, Any]) -> FabricError:
    """Rebuild the matching FabricError subclass from a wire error payload,
    so `except SomeError` works identically over local and HTTP transports."""
    err = (body or {}).get("error", {})
    code = err.get("code", "Internal")
    cls = _BY_CODE.get(code, FabricError)
    exc = cls(err.get("message", ""), detail=err.get("detail") or {})
    exc.code = code
    exc.http_status = status
    return exc
