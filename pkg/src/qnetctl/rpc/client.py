"""Orchestrator-side agent calls with deadlines, bounded retries and provenance."""
from __future__ import annotations

import hashlib
import itertools
import json
import socket
import threading
import time
from dataclasses import asdict, dataclass
from typing import Any, Callable

from .agent import Agent, parse_endpoint
from .protocol import DecodeError, Request, Response, decode, decode_body, encode, read_frame, to_wire, write_frame


class TransportError(Exception):
    """Every attempt timed out or the agent was unreachable."""


class RemoteError(Exception):
    """The agent answered with an application error."""

    def __init__(self, agent: str, method: str, code: str, message: str):
        super().__init__(f"{agent}.{method} failed: {code}: {message}")
        self.agent = agent
        self.method = method
        self.code = code
        self.message = message


class _Timeout(Exception):
    pass


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    per_attempt_timeout_ms: int = 2000
    backoff_ms: int = 100

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    @property
    def worst_case_ms(self) -> int:
        return self.max_attempts * (self.per_attempt_timeout_ms + self.backoff_ms)


@dataclass(frozen=True)
class ProvenanceRecord:
    seq: int
    wall_time: float
    virtual_time: float | None
    agent: str
    method: str
    params_digest: str
    outcome: str  # ok | error | timeout
    attempt: int
    request_id: int


def params_digest(params: dict) -> str:
    blob = json.dumps(to_wire(params), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ProvenanceLog:
    """Append-only, thread-safe record of every attempt issued in one run."""

    def __init__(self, virtual_clock: Callable[[], float] | None = None):
        self._records: list[ProvenanceRecord] = []
        self._lock = threading.Lock()
        self.virtual_clock = virtual_clock

    def append(self, **fields) -> ProvenanceRecord:
        vt = self.virtual_clock() if self.virtual_clock else None
        with self._lock:
            rec = ProvenanceRecord(seq=len(self._records), wall_time=time.time(), virtual_time=vt, **fields)
            self._records.append(rec)
        return rec

    @property
    def records(self) -> list[ProvenanceRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def for_agent(self, agent: str, method: str | None = None) -> list[ProvenanceRecord]:
        return [r for r in self.records if r.agent == agent and (method is None or r.method == method)]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)


class LocalTransport:
    """In-process path straight into an :class:`Agent` (no sockets).

    Dropped requests surface immediately as timeouts.  ``check_wire`` pushes
    every envelope through the frame codec to keep the two paths honest.
    """

    def __init__(self, agent: Agent, check_wire: bool = False):
        self.agent = agent
        self.check_wire = check_wire

    def exchange(self, request: Request, timeout_s: float) -> Response:
        if self.check_wire:
            request = decode(encode(request))
        response = self.agent.handle(request)
        if response is None:
            raise _Timeout()
        if self.check_wire:
            response = decode(encode(response))
        return response

    def close(self) -> None:
        pass


class TcpTransport:
    """One persistent connection; torn down and re-dialled after any timeout."""

    def __init__(self, endpoint: str):
        self.endpoint = endpoint
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _connect(self, timeout_s: float) -> socket.socket:
        if self._sock is None:
            host, port = parse_endpoint(self.endpoint)
            self._sock = socket.create_connection((host, port), timeout=timeout_s)
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return self._sock

    def exchange(self, request: Request, timeout_s: float) -> Response:
        with self._lock:
            deadline = time.monotonic() + timeout_s
            try:
                sock = self._connect(timeout_s)
                sock.settimeout(timeout_s)
                write_frame(sock, request)
                while True:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise socket.timeout()
                    sock.settimeout(remaining)
                    body = read_frame(sock)
                    if body is None:
                        raise ConnectionError("agent closed the connection")
                    response = decode_body(body)
                    if isinstance(response, Response) and response.id == request.id:
                        return response
            except (socket.timeout, OSError, DecodeError) as exc:
                self.close()
                raise _Timeout() from exc

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


_ids = itertools.count(1)
_id_lock = threading.Lock()


def next_request_id() -> int:
    with _id_lock:
        return next(_ids)


class AgentClient:
    def __init__(self, name: str, transport, provenance: ProvenanceLog | None = None,
                 policy: RetryPolicy | None = None, sleep: Callable[[float], None] = time.sleep):
        self.name = name
        self.transport = transport
        self.provenance = provenance if provenance is not None else ProvenanceLog()
        self.policy = policy or RetryPolicy()
        self._sleep = sleep

    def call(self, method: str, params: dict | None = None, policy: RetryPolicy | None = None) -> Any:
        """Return the first successful result, retrying timeouts per ``policy``."""
        policy = policy or self.policy
        params = dict(params or {})
        digest = params_digest(params)
        for attempt in range(1, policy.max_attempts + 1):
            request = Request(next_request_id(), method, params, policy.per_attempt_timeout_ms)
            try:
                response = self.transport.exchange(request, policy.per_attempt_timeout_ms / 1000.0)
            except _Timeout:
                self.provenance.append(agent=self.name, method=method, params_digest=digest,
                                       outcome="timeout", attempt=attempt, request_id=request.id)
                if attempt < policy.max_attempts and policy.backoff_ms:
                    self._sleep(policy.backoff_ms / 1000.0)
                continue
            outcome = "ok" if response.ok else "error"
            self.provenance.append(agent=self.name, method=method, params_digest=digest,
                                   outcome=outcome, attempt=attempt, request_id=request.id)
            if not response.ok:
                raise RemoteError(self.name, method, response.error_code or "error", response.message or "")
            return response.result
        raise TransportError(f"{self.name}.{method}: no response after {policy.max_attempts} attempt(s)")

    def close(self) -> None:
        self.transport.close()
