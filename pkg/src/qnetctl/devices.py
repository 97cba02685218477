"""Simulated device agents: EPS, one PA and one TTU per measurement site, plus a
sim-control agent for scripted disturbances.  All state lives in a shared
:class:`~qnetctl.testbed.Testbed`.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from . import polarization as pol
from .rpc.agent import Agent, AgentError
from .testbed import Testbed
from .timetags import to_bytes

# WP0–WP2 retardances that null an ideal fiber for the alignment routine:
# H -> V through WP0–WP2, and D -> V once WP3 adds its quarter wave.
ALIGNED_RETARDANCES = (np.pi, np.pi, np.pi / 2)
QUARTER_WAVE = np.pi / 2
_BASELINE = pol._retarder_product(*ALIGNED_RETARDANCES)

SOURCE_MODES = ("pairs", "alignment", "off")
REFERENCE_SOURCES = ("external", "internal")


def matrix_to_wire(u) -> dict:
    u = np.asarray(u, dtype=complex)
    return {"re": u.real.tolist(), "im": u.imag.tolist()}


def matrix_from_wire(obj) -> np.ndarray:
    if isinstance(obj, dict):
        return np.asarray(obj["re"], float) + 1j * np.asarray(obj["im"], float)
    return np.asarray(obj, dtype=complex)


def _number(params: dict, key: str, lo: float | None = None) -> float:
    value = params[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise AgentError("bad_params", f"{key} must be a finite number")
    if lo is not None and value < lo:
        raise AgentError("bad_params", f"{key} must be >= {lo}")
    return float(value)


def eps_agent(tb: Testbed, name: str = "eps") -> Agent:
    agent = Agent(name)

    def status(_params=None):
        e = tb.eps
        return {"attenuation": e.attenuation, "rep_rate": e.rep_rate, "pulse_period_ps": e.pulse_period_ps,
                "mode": e.mode, "alignment_basis": e.alignment_basis, "channel_pair": e.channel_pair}

    def set_attenuation(p):
        tb.set_eps(attenuation=_number(p, "attenuation", 0.0))
        return status()

    def set_mode(p):
        mode = p["mode"]
        if mode not in SOURCE_MODES:
            raise AgentError("bad_params", f"mode must be one of {SOURCE_MODES}")
        basis = p.get("basis", tb.eps.alignment_basis)
        if basis not in pol.BASIS_LABELS:
            raise AgentError("bad_params", f"unknown basis {basis!r}")
        tb.set_eps(mode=mode, alignment_basis=basis)
        return status()

    agent.register("eps.get_status", status)
    agent.register("eps.set_attenuation", set_attenuation)
    agent.register("eps.set_mode", set_mode)
    return agent


def pa_agent(tb: Testbed, site: str, name: str | None = None) -> Agent:
    agent = Agent(name or f"pa_{site}")
    state = {"frame": np.eye(2, dtype=complex), "aligned": list(ALIGNED_RETARDANCES)}

    def plates(_params=None):
        return list(tb.analyzers[site].retardances)

    def set_waveplate(p):
        index = p["index"]
        if isinstance(index, bool) or not isinstance(index, int) or not 0 <= index <= 3:
            raise AgentError("no_such_plate", f"no such plate {index!r} (valid indices 0-3)")
        tb.set_retardance(site, index, _number(p, "retardance"))
        return plates()

    def set_basis(p):
        label = p["label"]
        if label not in pol.BASIS_LABELS:
            raise AgentError("bad_params", f"unknown basis {label!r}")
        tb.set_analyzer(site, pol.analyzer_for(label, frame=state["frame"]))
        return plates()

    def commit_alignment(_p):
        # frame correction: undo whatever the aligned plates do beyond the nominal baseline
        r = tb.analyzers[site].retardances
        state["frame"] = np.linalg.inv(_BASELINE) @ pol._retarder_product(*r[:3])
        state["aligned"] = list(r[:3])
        return alignment()

    def reset_alignment(_p):
        state["frame"] = np.eye(2, dtype=complex)
        state["aligned"] = list(ALIGNED_RETARDANCES)
        return alignment()

    def alignment(_p=None):
        return {"frame": matrix_to_wire(state["frame"]), "aligned_retardances": list(state["aligned"])}

    agent.register("pa.get_waveplates", plates)
    agent.register("pa.set_waveplate", set_waveplate)
    agent.register("pa.set_basis", set_basis)
    agent.register("pa.commit_alignment", commit_alignment)
    agent.register("pa.reset_alignment", reset_alignment)
    agent.register("pa.get_alignment", alignment)
    return agent


def ttu_agent(tb: Testbed, site: str, name: str | None = None) -> Agent:
    agent = Agent(name or f"ttu_{site}")
    store: dict[str, bytes] = {}
    handles = itertools.count(1)

    def set_reference_clock(p):
        source = p["source"]
        if source not in REFERENCE_SOURCES:
            raise AgentError("bad_params", f"source must be one of {REFERENCE_SOURCES}")
        if source == "external" and tb.lock_faults[site] > 0:
            tb.lock_faults[site] -= 1
            raise AgentError("lock_failed", f"{site} oscillator did not lock to the reference")
        tb.set_locked(site, source == "external")
        return {"locked": tb.clocks[site].locked_to_reference}

    def acquire(p):
        duration = _number(p, "duration")
        if duration <= 0:
            raise AgentError("bad_params", "duration must be positive")
        sync_id = p.get("sync_id")
        tags = tb.acquire(site, duration, None if sync_id is None else str(sync_id))
        handle = f"{site}-{next(handles)}"
        store[handle] = to_bytes(tags)
        return {"handle": handle, "events": len(tags), "virtual_time": tb.now}

    def fetch(p):
        handle = p["handle"]
        if handle not in store:
            raise AgentError("no_such_handle", f"unknown stream handle {handle!r}")
        return store[handle]

    def release(p):
        return {"released": store.pop(p["handle"], None) is not None}

    def countrate(p):
        duration = _number(p, "duration")
        if duration <= 0:
            raise AgentError("bad_params", "duration must be positive")
        return {"counts": tb.count_singles(site, duration), "duration": duration}

    def status(_p):
        c = tb.clocks[site]
        return {"site": site, "locked": c.locked_to_reference, "stored_streams": len(store)}

    agent.register("ttu.set_reference_clock", set_reference_clock)
    agent.register("ttu.acquire", acquire)
    agent.register("ttu.fetch", fetch)
    agent.register("ttu.release", release)
    agent.register("ttu.countrate", countrate)
    agent.register("ttu.get_status", status)
    return agent


def sim_agent(tb: Testbed, name: str = "sim") -> Agent:
    """Test/operator hooks that act on the simulated world rather than a device."""
    agent = Agent(name)
    agent.register("sim.now", lambda p: {"virtual_time": tb.now})
    agent.register("sim.advance", lambda p: {"virtual_time": tb.advance(_number(p, "seconds", 0.0))})

    def inject(p):
        tb.inject_misalignment(p["site"], matrix_from_wire(p["unitary"]))
        return {"virtual_time": tb.now}

    def schedule(p):
        tb.schedule_misalignment(_number(p, "at", 0.0), p["site"], matrix_from_wire(p["unitary"]))
        return {"virtual_time": tb.now}

    def lock_faults(p):
        tb._check_site(p["site"])
        tb.lock_faults[p["site"]] = int(p["count"])
        return {"site": p["site"], "count": tb.lock_faults[p["site"]]}

    agent.register("sim.inject_misalignment", inject)
    agent.register("sim.schedule_misalignment", schedule)
    agent.register("sim.set_lock_faults", lock_faults)
    return agent


def agent_names(sites) -> list[str]:
    return ["eps", *(f"pa_{s}" for s in sites), *(f"ttu_{s}" for s in sites), "sim"]


def build_agents(tb: Testbed) -> dict[str, Agent]:
    agents = {"eps": eps_agent(tb)}
    for s in tb.sites:
        agents[f"pa_{s}"] = pa_agent(tb, s)
    for s in tb.sites:
        agents[f"ttu_{s}"] = ttu_agent(tb, s)
    agents["sim"] = sim_agent(tb)
    return agents
