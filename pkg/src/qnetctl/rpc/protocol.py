"""Length-prefixed JSON envelopes exchanged between the orchestrator and device agents.

Frame layout: ``uint32 big-endian length`` followed by that many bytes of
UTF-8 JSON.  Requests carry ``{id, method, params, deadline_ms}``; responses
carry ``{id, status, result}`` or ``{id, status: "error", error: {code, message}}``.
Binary values travel as ``{"__bytes__": "<base64>"}``.
"""
from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field
from typing import Any

HEADER = struct.Struct(">I")
HEADER_SIZE = HEADER.size
MAX_FRAME = 512 * 1024 * 1024


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Request:
    id: int
    method: str
    params: dict = field(default_factory=dict)
    deadline_ms: int = 2000


@dataclass(frozen=True)
class Response:
    id: int
    status: str
    result: Any = None
    error_code: str | None = None
    message: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @classmethod
    def success(cls, req_id: int, result: Any = None) -> "Response":
        return cls(req_id, "ok", result)

    @classmethod
    def failure(cls, req_id: int, code: str, message: str) -> "Response":
        return cls(req_id, "error", None, code, message)


def to_wire(value: Any) -> Any:
    if isinstance(value, (bytes, bytearray, memoryview)):
        return {"__bytes__": base64.b64encode(bytes(value)).decode("ascii")}
    if isinstance(value, dict):
        return {str(k): to_wire(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_wire(v) for v in value]
    if hasattr(value, "item") and callable(value.item):  # numpy scalars
        return value.item()
    return value


def from_wire(value: Any) -> Any:
    if isinstance(value, dict):
        if set(value) == {"__bytes__"}:
            return base64.b64decode(value["__bytes__"])
        return {k: from_wire(v) for k, v in value.items()}
    if isinstance(value, list):
        return [from_wire(v) for v in value]
    return value


def _as_object(envelope: Request | Response) -> dict:
    if isinstance(envelope, Request):
        return {"id": envelope.id, "method": envelope.method,
                "params": to_wire(envelope.params), "deadline_ms": envelope.deadline_ms}
    obj = {"id": envelope.id, "status": envelope.status}
    if envelope.ok:
        obj["result"] = to_wire(envelope.result)
    else:
        obj["error"] = {"code": envelope.error_code, "message": envelope.message}
    return obj


def encode(envelope: Request | Response) -> bytes:
    body = json.dumps(_as_object(envelope), separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise ValueError(f"frame of {len(body)} bytes exceeds limit {MAX_FRAME}")
    return HEADER.pack(len(body)) + body


def frame_length(header: bytes) -> int:
    if len(header) < HEADER_SIZE:
        raise DecodeError("truncated frame header", len(header))
    (length,) = HEADER.unpack(header[:HEADER_SIZE])
    if length > MAX_FRAME:
        raise DecodeError(f"frame length {length} exceeds limit", 0)
    return length


def decode_body(body: bytes, base: int = HEADER_SIZE) -> Request | Response:
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError("frame body is not UTF-8", base + exc.start) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DecodeError(f"invalid JSON: {exc.msg}", base + exc.pos) from None
    if not isinstance(obj, dict) or not isinstance(obj.get("id"), int):
        raise DecodeError("envelope must be an object with an integer id", base)
    if "method" in obj:
        params = obj.get("params", {})
        if not isinstance(obj["method"], str) or not isinstance(params, dict):
            raise DecodeError("request needs a string method and object params", base)
        return Request(obj["id"], obj["method"], from_wire(params), int(obj.get("deadline_ms", 2000)))
    status = obj.get("status")
    if status == "ok":
        return Response(obj["id"], "ok", from_wire(obj.get("result")))
    if status == "error":
        err = obj.get("error") or {}
        return Response(obj["id"], "error", None, err.get("code"), err.get("message"))
    raise DecodeError(f"unknown envelope (status={status!r})", base)


def decode(frame: bytes) -> Request | Response:
    """Decode exactly one complete frame."""
    length = frame_length(frame)
    body = frame[HEADER_SIZE:]
    if len(body) < length:
        raise DecodeError(f"truncated frame: expected {length} body bytes, got {len(body)}", HEADER_SIZE + len(body))
    if len(body) > length:
        raise DecodeError("trailing bytes after frame", HEADER_SIZE + length)
    return decode_body(body)


def read_frame(sock) -> bytes | None:
    """Read one frame body from a blocking socket; ``None`` on clean EOF."""
    header = _recv_exact(sock, HEADER_SIZE, allow_eof=True)
    if header is None:
        return None
    length = frame_length(header)
    return _recv_exact(sock, length)


def write_frame(sock, envelope: Request | Response) -> None:
    sock.sendall(encode(envelope))


def _recv_exact(sock, n: int, allow_eof: bool = False) -> bytes | None:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            if allow_eof and got == 0:
                return None
            raise DecodeError("connection closed mid-frame", got)
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)
