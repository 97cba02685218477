"""Device agents and the TCP server that hosts them.

An :class:`Agent` is a sequential state machine: a single worker thread
drains a FIFO queue, so requests on one device run strictly in arrival
order no matter how many connections feed it.
"""
from __future__ import annotations

import logging
import queue
import socket
import socketserver
import threading
import time
from concurrent.futures import Future
from typing import Any, Callable

from .protocol import DecodeError, Request, Response, decode_body, read_frame, write_frame

log = logging.getLogger(__name__)


class AgentError(Exception):
    """Application-level failure reported back to the caller as an error response."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


class Agent:
    """Method table plus fault-injection hooks for one simulated device."""

    def __init__(self, name: str):
        self.name = name
        self._methods: dict[str, Callable[[dict], Any]] = {"ping": lambda params: {"agent": self.name}}
        self._lock = threading.Lock()
        self.drop_next = 0
        self.handled = 0

    def register(self, method: str, fn: Callable[[dict], Any]) -> None:
        self._methods[method] = fn

    @property
    def methods(self) -> list[str]:
        return sorted(self._methods)

    def handle(self, request: Request) -> Response | None:
        """Execute one request; ``None`` means the request was dropped (fault injection)."""
        with self._lock:
            self.handled += 1
            if self.drop_next > 0:
                self.drop_next -= 1
                return None
            fn = self._methods.get(request.method)
            if fn is None:
                return Response.failure(request.id, "unknown_method", f"{self.name} has no method {request.method!r}")
            try:
                return Response.success(request.id, fn(dict(request.params)))
            except AgentError as exc:
                return Response.failure(request.id, exc.code, exc.message)
            except (KeyError, TypeError, ValueError) as exc:
                return Response.failure(request.id, "bad_params", str(exc))


class _Worker(threading.Thread):
    def __init__(self, agent: Agent):
        super().__init__(name=f"agent-{agent.name}", daemon=True)
        self.agent = agent
        self.inbox: queue.Queue = queue.Queue()

    def run(self):
        while True:
            item = self.inbox.get()
            if item is None:
                return
            request, received, future = item
            if (time.monotonic() - received) * 1000.0 > request.deadline_ms:
                future.set_result(Response.failure(request.id, "deadline_exceeded", "request expired in queue"))
                continue
            future.set_result(self.agent.handle(request))

    def submit(self, request: Request) -> Future:
        future: Future = Future()
        self.inbox.put((request, time.monotonic(), future))
        return future


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        worker: _Worker = self.server.worker  # type: ignore[attr-defined]
        sock: socket.socket = self.request
        while True:
            try:
                body = read_frame(sock)
            except (DecodeError, OSError):
                return
            if body is None:
                return
            try:
                request = decode_body(body)
            except DecodeError as exc:
                write_frame(sock, Response.failure(0, "malformed_frame", str(exc)))
                continue
            if not isinstance(request, Request):
                write_frame(sock, Response.failure(request.id, "malformed_frame", "expected a request"))
                continue
            response = worker.submit(request).result()
            if response is None:
                continue
            try:
                write_frame(sock, response)
            except OSError:
                return


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class AgentServer:
    """Serve one agent on a TCP endpoint (``host:port``; port 0 picks a free one)."""

    def __init__(self, agent: Agent, endpoint: str = "127.0.0.1:0"):
        host, port = parse_endpoint(endpoint)
        self.agent = agent
        self.worker = _Worker(agent)
        self._server = _Server((host, port), _Handler)
        self._server.worker = self.worker
        self._thread = threading.Thread(target=self._server.serve_forever, name=f"serve-{agent.name}", daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "AgentServer":
        self.worker.start()
        self._thread.start()
        log.info("agent %s listening on %s", self.agent.name, self.endpoint)
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self.worker.inbox.put(None)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve_agent(agent: Agent, endpoint: str = "127.0.0.1:0") -> AgentServer:
    return AgentServer(agent, endpoint).start()


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    return host, int(port)
