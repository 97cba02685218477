from .agent import Agent, AgentError, AgentServer, serve_agent
from .client import (
    AgentClient,
    LocalTransport,
    ProvenanceLog,
    ProvenanceRecord,
    RemoteError,
    RetryPolicy,
    TcpTransport,
    TransportError,
)
from .protocol import DecodeError, Request, Response, decode, encode

__all__ = [
    "Agent", "AgentError", "AgentServer", "serve_agent",
    "AgentClient", "LocalTransport", "TcpTransport", "ProvenanceLog", "ProvenanceRecord",
    "RemoteError", "RetryPolicy", "TransportError",
    "DecodeError", "Request", "Response", "decode", "encode",
]
