"""Simulated infrastructure plane: pair source, fibers, analyzers, detectors and time taggers.

Time is virtual.  ``simulate_acquisition`` turns a :class:`Scenario` snapshot
plus a window ``[start, start+duration)`` into per-site :class:`TimeTags`.
Photon pairs are born on the pump pulse grid, so several pairs in one pulse
(Poissonian multipair emission) show up as same-pulse accidentals.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace

import numpy as np

from . import polarization as pol
from .timetags import TimeTags

PS_PER_S = 10**12

DETECTOR_CH = 1
PPS_CH = 2
REF_CH = 3

REFERENCE_RATE = 10_000_000  # 10 MHz
DRIFT_STEP_S = 1.0


@dataclass(frozen=True)
class EpsModel:
    rep_rate: float = 250e6
    mu0: float = 0.05
    attenuation: float = 0.0
    intrinsic_visibility: float = 1.0
    channel_pair: str = "CH45/CH23"
    # uncorrelated source noise reaching each detector while pairs are emitted (counts/s)
    noise_rates: tuple[float, float] = (0.0, 0.0)
    alignment_rate: float = 1e5
    mode: str = "pairs"  # pairs | alignment | off
    alignment_basis: str = "H"

    def __post_init__(self):
        if self.mu0 < 0 or self.rep_rate <= 0:
            raise ValueError("mu0 must be >= 0 and rep_rate > 0")
        if self.mode not in ("pairs", "alignment", "off"):
            raise ValueError(f"unknown source mode {self.mode!r}")

    @property
    def mu(self) -> float:
        return self.mu0 * 10.0 ** (-self.attenuation / 10.0)

    @property
    def pulse_period_ps(self) -> int:
        return int(round(PS_PER_S / self.rep_rate))


@dataclass(frozen=True)
class FiberChannel:
    length_km: float = 0.0
    loss_db_per_km: float = 0.0
    propagation_delay_ps: int = 0
    drift_rate: float = 0.0
    seed: int = 0
    misalignment: np.ndarray | None = None
    insertion_loss_db: float = 0.0  # lumped connector/analyzer loss

    @property
    def transmission(self) -> float:
        return 10.0 ** (-(self.loss_db_per_km * self.length_km + self.insertion_loss_db) / 10.0)


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 1.0
    dark_rate: float = 0.0
    jitter_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("detector efficiency must lie in [0, 1]")
        if self.dark_rate < 0:
            raise ValueError("dark rate must be nonnegative")


@dataclass(frozen=True)
class ClockModel:
    offset: int = 0
    drift_ppm: float = 0.0
    jitter_sigma: float = 0.0
    locked_to_reference: bool = False
    reference_divider: int = 1000

    @property
    def effective_drift_ppm(self) -> float:
        return 0.0 if self.locked_to_reference else self.drift_ppm


@dataclass(frozen=True)
class Scenario:
    eps: EpsModel
    channels: dict[str, FiberChannel]
    analyzers: dict[str, pol.AnalyzerState]
    detectors: dict[str, DetectorModel]
    clocks: dict[str, ClockModel]
    true_state: np.ndarray = field(default_factory=lambda: pol.bell_state("phi+"))
    sites: tuple[str, str] = ("site2", "site3")
    hub: str = "site1"

    def __post_init__(self):
        if len(self.sites) != 2 or len(set(self.sites)) != 2 or self.hub in self.sites:
            raise ValueError("a scenario has one source hub and two distinct measurement sites")
        for part in ("channels", "analyzers", "detectors", "clocks"):
            missing = set(self.sites) - set(getattr(self, part))
            if missing:
                raise ValueError(f"scenario {part} missing site(s) {sorted(missing)}")
        pol.check_density_matrix(self.true_state, atol=1e-8)

    def with_eps(self, **changes) -> "Scenario":
        return replace(self, eps=replace(self.eps, **changes))

    def efficiency(self, site: str) -> float:
        return self.detectors[site].efficiency * self.channels[site].transmission


def pair_rate(eps: EpsModel) -> float:
    """Emitted pairs per second: ``rep_rate · mu0 · 10^(-α/10)``."""
    return eps.rep_rate * eps.mu


# -- fiber polarization drift -------------------------------------------------

@functools.lru_cache(maxsize=4096)
def _drift_block(seed: int, block: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xD21F7, int(block)])
    return rng.standard_normal((1024, 3))


_prefix_cache: dict[tuple[int, float], list[np.ndarray]] = {}


def _walk_prefix(seed: int, rate: float, steps: int) -> np.ndarray:
    key = (int(seed), float(rate))
    prefix = _prefix_cache.setdefault(key, [np.eye(2, dtype=complex)])
    scale = rate * np.sqrt(DRIFT_STEP_S)
    while len(prefix) <= steps:
        k = len(prefix) - 1
        inc = _drift_block(seed, k // 1024)[k % 1024] * scale
        prefix.append(pol.su2_from_vector(inc) @ prefix[-1])
    return prefix[steps]


def drift_unitary(channel: FiberChannel, elapsed: float) -> np.ndarray:
    """Random-walk polarization rotation accumulated after ``elapsed`` seconds.

    Each ``DRIFT_STEP_S`` step rotates the Poincaré sphere by a Gaussian vector
    with per-axis std ``drift_rate·√step``; partial steps are scaled in.
    Reproducible for a fixed ``channel.seed``.
    """
    if elapsed < 0:
        raise ValueError("elapsed time must be nonnegative")
    if channel.drift_rate == 0.0 or elapsed == 0.0:
        return np.eye(2, dtype=complex)
    steps = int(elapsed // DRIFT_STEP_S)
    frac = elapsed / DRIFT_STEP_S - steps
    u = _walk_prefix(channel.seed, channel.drift_rate, steps)
    if frac > 0:
        inc = _drift_block(channel.seed, steps // 1024)[steps % 1024]
        u = pol.su2_from_vector(inc * channel.drift_rate * np.sqrt(frac * DRIFT_STEP_S)) @ u
    return u


def channel_unitary(channel: FiberChannel, elapsed: float) -> np.ndarray:
    u = drift_unitary(channel, elapsed)
    if channel.misalignment is not None:
        u = u @ np.asarray(channel.misalignment, dtype=complex)
    return u


# -- detection model ----------------------------------------------------------

def _site_operator(scenario: Scenario, site: str, elapsed: float) -> np.ndarray:
    """Row vector ``⟨H| U_analyzer U_fiber``: the amplitude the polarizer passes."""
    u = pol.analyzer_unitary(scenario.analyzers[site]) @ channel_unitary(scenario.channels[site], elapsed)
    return u[0, :]


def emitted_state(scenario: Scenario) -> np.ndarray:
    v = scenario.eps.intrinsic_visibility
    return v * scenario.true_state + (1.0 - v) * np.eye(4, dtype=complex) / 4.0


def transmission_probabilities(scenario: Scenario, elapsed: float) -> tuple[float, float, float]:
    """Polarizer pass probabilities ``(p_both, p_a, p_b)`` for one pair."""
    a, b = scenario.sites
    ha = _site_operator(scenario, a, elapsed)
    hb = _site_operator(scenario, b, elapsed)
    rho = emitted_state(scenario)
    joint = np.kron(ha, hb)
    p_both = float(np.real(joint.conj() @ rho @ joint))
    r = rho.reshape(2, 2, 2, 2)
    rho_a = np.einsum("ijkj->ik", r)
    rho_b = np.einsum("jijk->ik", r)
    p_a = float(np.real(ha.conj() @ rho_a @ ha))
    p_b = float(np.real(hb.conj() @ rho_b @ hb))
    return (min(max(p_both, 0.0), 1.0), min(max(p_a, 0.0), 1.0), min(max(p_b, 0.0), 1.0))


def photon_singles_rates(scenario: Scenario, elapsed: float = 0.0) -> dict[str, float]:
    """Photon (non-dark) detection rates per site, counts/s."""
    eps = scenario.eps
    a, b = scenario.sites
    if eps.mode == "off":
        return {a: 0.0, b: 0.0}
    if eps.mode == "alignment":
        psi = pol.basis_state(eps.alignment_basis)
        out = {}
        for site in scenario.sites:
            amp = _site_operator(scenario, site, elapsed) @ psi
            out[site] = eps.alignment_rate * scenario.efficiency(site) * float(abs(amp) ** 2)
        return out
    _, pa, pb = transmission_probabilities(scenario, elapsed)
    rate = pair_rate(eps)
    return {
        a: rate * scenario.efficiency(a) * pa + eps.noise_rates[0],
        b: rate * scenario.efficiency(b) * pb + eps.noise_rates[1],
    }


def singles_rates(scenario: Scenario, elapsed: float = 0.0) -> dict[str, float]:
    photons = photon_singles_rates(scenario, elapsed)
    return {s: photons[s] + scenario.detectors[s].dark_rate for s in scenario.sites}


def accidental_model(scenario: Scenario, window_ps: int, elapsed: float = 0.0) -> float:
    """Expected accidental coincidences per second in a window of ``window_ps``.

    Uncorrelated continuous singles give ``S_a·S_b·τ``.  Pair photons arrive on
    the pump pulse grid, so two of them from different pairs coincide once
    per shared pulse: their product term uses ``1/rep_rate`` instead of ``τ``
    (requires ``τ`` shorter than one pulse period).
    """
    tau = window_ps / PS_PER_S
    total = singles_rates(scenario, elapsed)
    a, b = scenario.sites
    eps = scenario.eps
    if eps.mode != "pairs":
        return total[a] * total[b] * tau
    _, pa, pb = transmission_probabilities(scenario, elapsed)
    rate = pair_rate(eps)
    pulsed_a = rate * scenario.efficiency(a) * pa
    pulsed_b = rate * scenario.efficiency(b) * pb
    continuous = total[a] * total[b] - pulsed_a * pulsed_b
    return continuous * tau + pulsed_a * pulsed_b / eps.rep_rate


def coincidence_model(scenario: Scenario, elapsed: float = 0.0) -> float:
    """Expected true-pair coincidences per second."""
    if scenario.eps.mode != "pairs":
        return 0.0
    p_both, _, _ = transmission_probabilities(scenario, elapsed)
    a, b = scenario.sites
    return pair_rate(scenario.eps) * scenario.efficiency(a) * scenario.efficiency(b) * p_both


# -- tag generation -----------------------------------------------------------

def _uniform_times(rng, n: int, t0: int, span: int) -> np.ndarray:
    if n == 0:
        return np.zeros(0, np.int64)
    return t0 + rng.integers(0, span, size=n, dtype=np.int64)


def _gaussian(rng, sigma: float, n: int) -> np.ndarray:
    if sigma <= 0 or n == 0:
        return np.zeros(n, np.int64)
    return np.rint(rng.normal(0.0, sigma, size=n)).astype(np.int64)


def _to_local(clock: ClockModel, true_times: np.ndarray, rng) -> np.ndarray:
    t = true_times
    drift = clock.effective_drift_ppm
    if drift:
        t = t + np.rint(t.astype(float) * drift * 1e-6).astype(np.int64)
    return t + int(clock.offset) + _gaussian(rng, clock.jitter_sigma, t.size)


def _grid(t0: int, t1: int, period: int, delay: int) -> np.ndarray:
    """True arrival times of periodic pulses emitted at k·period, delayed by ``delay``."""
    first = -((-(t0 - delay)) // period)
    last = (t1 - delay - 1) // period
    if last < first:
        return np.zeros(0, np.int64)
    return np.arange(first, last + 1, dtype=np.int64) * period + delay


def simulate_acquisition(scenario: Scenario, duration: float, seed: int, start: float = 0.0,
                         elapsed: float | None = None) -> dict[str, TimeTags]:
    """Generate one coordinated acquisition for both measurement sites.

    ``start``/``duration`` are virtual seconds.  ``elapsed`` (default ``start``)
    sets the fiber drift state, held constant over the window.
    Channel 1 carries detections, channel 2 PPS and channel 3 the divided
    10 MHz reference.
    """
    if duration <= 0:
        raise ValueError("acquisition duration must be positive")
    elapsed = start if elapsed is None else elapsed
    rng = np.random.default_rng(seed)
    t0 = int(round(start * PS_PER_S))
    span = int(round(duration * PS_PER_S))
    t1 = t0 + span
    eps = scenario.eps
    a, b = scenario.sites
    det = {a: [], b: []}

    if eps.mode == "pairs":
        n_pairs = rng.poisson(pair_rate(eps) * duration)
        p_both, pa, pb = transmission_probabilities(scenario, elapsed)
        ea, eb = scenario.efficiency(a), scenario.efficiency(b)
        p11 = ea * eb * p_both
        p10 = max(ea * pa - p11, 0.0)
        p01 = max(eb * pb - p11, 0.0)
        p00 = max(1.0 - p11 - p10 - p01, 0.0)
        probs = np.array([p11, p10, p01, p00]) / (p11 + p10 + p01 + p00)
        n11, n10, n01, _ = rng.multinomial(n_pairs, probs)
        period = eps.pulse_period_ps
        first_pulse = -(-t0 // period)
        n_pulses = max((t1 - 1) // period - first_pulse + 1, 1)
        pulses = (first_pulse + rng.integers(0, n_pulses, size=n11 + n10 + n01, dtype=np.int64)) * period
        det[a].append(pulses[: n11 + n10])
        det[b].append(np.concatenate([pulses[:n11], pulses[n11 + n10:]]))
        for site, noise in zip((a, b), eps.noise_rates):
            det[site].append(_uniform_times(rng, rng.poisson(noise * duration), t0, span))
    elif eps.mode == "alignment":
        for site, rate in photon_singles_rates(scenario, elapsed).items():
            det[site].append(_uniform_times(rng, rng.poisson(rate * duration), t0, span))

    out = {}
    for site in (a, b):
        channel = scenario.channels[site]
        detector = scenario.detectors[site]
        clock = scenario.clocks[site]
        delay = int(channel.propagation_delay_ps)
        photons = np.concatenate(det[site]) if det[site] else np.zeros(0, np.int64)
        photons = photons + delay + _gaussian(rng, detector.jitter_sigma, photons.size)
        dark = _uniform_times(rng, rng.poisson(detector.dark_rate * duration), t0, span)
        clicks = np.concatenate([photons, dark])
        clicks = clicks[(clicks >= t0) & (clicks < t1)]
        pps = _grid(t0, t1, PS_PER_S, delay)
        ref_period = (PS_PER_S // REFERENCE_RATE) * max(int(clock.reference_divider), 1)
        ref = _grid(t0, t1, ref_period, delay)
        # sort each channel on its own (cheap), then a stable merge of the sorted runs
        parts = [np.sort(_to_local(clock, part, rng)) for part in (clicks, pps, ref)]
        chans = np.concatenate([np.full(part.size, ch, np.uint16)
                                for part, ch in zip(parts, (DETECTOR_CH, PPS_CH, REF_CH))])
        out[site] = TimeTags.from_unsorted(chans, np.concatenate(parts), site)
    return out


def sample_singles(scenario: Scenario, duration: float, seed: int, elapsed: float = 0.0) -> dict[str, int]:
    """Counter-mode singles: Poisson draws from the same rate model, no tags."""
    if duration <= 0:
        raise ValueError("count duration must be positive")
    rng = np.random.default_rng(seed)
    return {site: int(rng.poisson(rate * duration)) for site, rate in singles_rates(scenario, elapsed).items()}
