"""The orchestrator's view of the testbed: one RPC client per device agent."""
from __future__ import annotations

import itertools

from .rpc.agent import Agent
from .rpc.client import AgentClient, LocalTransport, ProvenanceLog, RetryPolicy, TcpTransport
from .timetags import TimeTags, from_bytes


class Network:
    """Named agent clients sharing one provenance log.

    ``sites[0]`` carries the signal detector and ``sites[1]`` the idler.  The
    clock offset found by synchronization is kept here so later acquisitions
    can be merged without fresh PPS events.
    """

    def __init__(self, clients: dict[str, AgentClient], sites: tuple[str, str], provenance: ProvenanceLog):
        self.clients = clients
        self.sites = tuple(sites)
        self.provenance = provenance
        self.offset: int | None = None
        self._sync_ids = itertools.count(1)

    @classmethod
    def local(cls, agents: dict[str, Agent], sites, policy: RetryPolicy | None = None,
              provenance: ProvenanceLog | None = None, check_wire: bool = False) -> "Network":
        log = provenance if provenance is not None else ProvenanceLog()
        clients = {n: AgentClient(n, LocalTransport(a, check_wire), log, policy) for n, a in agents.items()}
        return cls(clients, sites, log)

    @classmethod
    def tcp(cls, endpoints: dict[str, str], sites, policy: RetryPolicy | None = None,
            provenance: ProvenanceLog | None = None) -> "Network":
        log = provenance if provenance is not None else ProvenanceLog()
        clients = {n: AgentClient(n, TcpTransport(ep), log, policy) for n, ep in endpoints.items()}
        return cls(clients, sites, log)

    def client(self, name: str) -> AgentClient:
        try:
            return self.clients[name]
        except KeyError:
            raise KeyError(f"no agent named {name!r} in this network") from None

    def call(self, name: str, method: str, params: dict | None = None, policy: RetryPolicy | None = None):
        return self.client(name).call(method, params, policy)

    @property
    def eps(self) -> AgentClient:
        return self.client("eps")

    def pa(self, site: str) -> AgentClient:
        return self.client(f"pa_{site}")

    def ttu(self, site: str) -> AgentClient:
        return self.client(f"ttu_{site}")

    @property
    def sim(self) -> AgentClient:
        return self.client("sim")

    def virtual_time(self) -> float:
        return float(self.sim.call("sim.now")["virtual_time"]) if "sim" in self.clients else float("nan")

    def acquire(self, duration: float) -> dict[str, TimeTags]:
        """Coordinated acquisition on both TTUs; streams fetched by handle and released."""
        sync_id = f"acq-{next(self._sync_ids)}"
        handles = {s: self.ttu(s).call("ttu.acquire", {"duration": duration, "sync_id": sync_id})["handle"]
                   for s in self.sites}
        out = {}
        for s, h in handles.items():
            out[s] = from_bytes(self.ttu(s).call("ttu.fetch", {"handle": h}), site=s)
            self.ttu(s).call("ttu.release", {"handle": h})
        return out

    def singles(self, site: str, duration: float) -> int:
        return int(self.ttu(site).call("ttu.countrate", {"duration": duration})["counts"])

    def close(self) -> None:
        for c in self.clients.values():
            c.close()
