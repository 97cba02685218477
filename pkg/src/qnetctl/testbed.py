"""Mutable, virtual-time state of the simulated three-site testbed.

Device agents never talk to :mod:`photonics` directly; they read and write a
shared :class:`Testbed`.  The testbed owns the virtual clock, hands out
reproducible per-acquisition seeds, groups the two TTUs of a coordinated
acquisition, and applies scripted fiber disturbances when their time comes.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, replace

import numpy as np

from . import photonics as ph
from . import polarization as pol
from .timetags import TimeTags


@dataclass(frozen=True)
class ScheduledMisalignment:
    at: float  # virtual seconds
    site: str
    unitary: np.ndarray


class Testbed:
    def __init__(self, scenario: ph.Scenario, seed: int = 0):
        self.sites = scenario.sites
        self.hub = scenario.hub
        self.true_state = scenario.true_state
        self.eps = scenario.eps
        self.channels = dict(scenario.channels)
        self.analyzers = dict(scenario.analyzers)
        self.detectors = dict(scenario.detectors)
        self.clocks = dict(scenario.clocks)
        self.seed = int(seed)
        self.now = 0.0
        self.lock_faults = {s: 0 for s in self.sites}
        self._events: list[ScheduledMisalignment] = []
        self._counter = 0
        self._groups: dict[str, dict[str, TimeTags]] = {}
        self._lock = threading.RLock()

    # -- scenario snapshot -------------------------------------------------
    def scenario(self) -> ph.Scenario:
        with self._lock:
            return ph.Scenario(self.eps, dict(self.channels), dict(self.analyzers), dict(self.detectors),
                               dict(self.clocks), self.true_state, self.sites, self.hub)

    def _check_site(self, site: str) -> None:
        if site not in self.sites:
            raise KeyError(f"unknown site {site!r}")

    def _next_seed(self, kind: int) -> int:
        self._counter += 1
        ss = np.random.SeedSequence(self.seed, spawn_key=(kind, self._counter))
        return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))

    # -- virtual time ------------------------------------------------------
    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("cannot move virtual time backwards")
        with self._lock:
            self.now += float(seconds)
            self._apply_due()
            return self.now

    def _apply_due(self) -> None:
        due = [e for e in self._events if e.at <= self.now]
        self._events = [e for e in self._events if e.at > self.now]
        for e in sorted(due, key=lambda e: e.at):
            self.inject_misalignment(e.site, e.unitary)

    def schedule_misalignment(self, at: float, site: str, unitary) -> None:
        self._check_site(site)
        with self._lock:
            self._events.append(ScheduledMisalignment(float(at), site, np.asarray(unitary, dtype=complex)))
            self._apply_due()

    def inject_misalignment(self, site: str, unitary) -> None:
        """Compose an extra fixed rotation onto a fiber (applied after the existing one)."""
        self._check_site(site)
        u = np.asarray(unitary, dtype=complex)
        if u.shape != (2, 2) or not np.allclose(u @ u.conj().T, np.eye(2), atol=1e-9):
            raise ValueError("misalignment must be a 2x2 unitary")
        with self._lock:
            ch = self.channels[site]
            old = np.eye(2, dtype=complex) if ch.misalignment is None else np.asarray(ch.misalignment)
            self.channels[site] = replace(ch, misalignment=u @ old)

    # -- device state ------------------------------------------------------
    def set_eps(self, **changes) -> ph.EpsModel:
        with self._lock:
            self.eps = replace(self.eps, **changes)
            return self.eps

    def set_retardance(self, site: str, index: int, retardance: float) -> None:
        self._check_site(site)
        with self._lock:
            r = list(self.analyzers[site].retardances)
            r[index] = float(retardance) % pol.TWO_PI
            self.analyzers[site] = pol.AnalyzerState.from_retardances(r)

    def set_analyzer(self, site: str, analyzer: pol.AnalyzerState) -> None:
        self._check_site(site)
        with self._lock:
            self.analyzers[site] = analyzer

    def set_locked(self, site: str, locked: bool) -> None:
        self._check_site(site)
        with self._lock:
            self.clocks[site] = replace(self.clocks[site], locked_to_reference=bool(locked))

    # -- measurements ------------------------------------------------------
    def acquire(self, site: str, duration: float, sync_id: str | None = None) -> TimeTags:
        """Tags of ``site`` for a coordinated acquisition.

        The first TTU to arrive with a given ``sync_id`` triggers generation
        for both sites and advances virtual time; its partner collects the
        matching stream.  Without a ``sync_id`` the acquisition is solo.
        """
        self._check_site(site)
        with self._lock:
            group = self._groups.get(sync_id) if sync_id is not None else None
            if group is None:
                self._apply_due()
                scenario = self.scenario()
                group = ph.simulate_acquisition(scenario, duration, self._next_seed(1), start=self.now)
                self.advance(duration)
                if sync_id is not None:
                    self._groups[sync_id] = group
            tags = group.pop(site) if sync_id is not None else group[site]
            if sync_id is not None and not group:
                del self._groups[sync_id]
            return tags

    def count_singles(self, site: str, duration: float) -> int:
        """Counter-mode singles at ``site`` over ``duration`` (advances virtual time)."""
        self._check_site(site)
        with self._lock:
            self._apply_due()
            counts = ph.sample_singles(self.scenario(), duration, self._next_seed(2), elapsed=self.now)
            self.advance(duration)
            return counts[site]
