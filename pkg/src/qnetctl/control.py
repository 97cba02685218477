"""Control-plane routines, all driven through agent calls: site synchronization,
dark-count gate, EPS calibration sweep and waveplate drift compensation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import timetags as tt
from .devices import QUARTER_WAVE
from .network import Network
from .photonics import DETECTOR_CH, PPS_CH, REF_CH
from .rpc.client import RemoteError

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(np.arange(0.0, 16.0, 0.5))
DEG = np.pi / 180.0
# channel ids of the second site's streams after merging
REMAP_B = {DETECTOR_CH: 4, PPS_CH: 5, REF_CH: 6}
MAX_COARSE_ROUNDS = 3


class ControlError(Exception):
    pass


class SyncFailure(ControlError):
    pass


class CalibrationFailure(ControlError):
    pass


class DarkCountAbort(ControlError):
    def __init__(self, violations: dict[str, float], bounds: "DarkCountBounds"):
        parts = ", ".join(f"{site} dark rate {rate:.1f}/s" for site, rate in violations.items())
        super().__init__(f"abort: {parts} outside [{bounds.d_min}, {bounds.d_max}]")
        self.violations = violations
        self.bounds = bounds


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


class Report:
    """Mixin: structured record for persistence."""

    def to_dict(self) -> dict:
        return _jsonable({"routine": type(self).__name__, **asdict(self)})


# -- synchronization -----------------------------------------------------------

@dataclass
class SyncReport(Report):
    offset: int
    rms_jitter: float
    pps_events: int
    residual_offset: int
    lock_attempts: dict[str, int]
    reference_pairs: int


def lock_reference(net: Network, site: str, attempts: int = 3) -> int:
    """Lock one TTU to the shared reference, retrying failed locks. Returns attempts used."""
    for k in range(1, attempts + 1):
        try:
            net.ttu(site).call("ttu.set_reference_clock", {"source": "external"})
            return k
        except RemoteError as exc:
            if exc.code != "lock_failed":
                raise
            log.warning("%s: reference lock attempt %d failed", site, k)
    raise SyncFailure(f"{site}: reference lock failed after {attempts} attempts")


def synchronize_sites(net: Network, duration: float = 5.0, lock_attempts: int = 3, min_pps: int = 3,
                      bin_width: int = 1, span: int = 2000) -> SyncReport:
    """Lock both TTUs, take a coordinated acquisition and align the sites on PPS."""
    a, b = net.sites
    used = {s: lock_reference(net, s, lock_attempts) for s in net.sites}
    streams = net.acquire(duration)
    pps_a, pps_b = tt.extract_pps(streams[a], PPS_CH), tt.extract_pps(streams[b], PPS_CH)
    if min(pps_a.size, pps_b.size) < min_pps:
        raise SyncFailure(f"only {min(pps_a.size, pps_b.size)} PPS events (need {min_pps})")
    offset = tt.estimate_offset(pps_a, pps_b)
    merged = tt.merge_streams(streams[a], streams[b], offset, REMAP_B)
    residual = tt.estimate_offset(merged.channel(PPS_CH), merged.channel(REMAP_B[PPS_CH]))
    hist = tt.correlation_histogram(merged, REF_CH, REMAP_B[REF_CH], bin_width, span)
    if hist.is_empty:
        raise SyncFailure("no reference-clock correlations inside the span")
    net.offset = offset
    return SyncReport(offset, tt.rms_jitter(hist), int(min(pps_a.size, pps_b.size)), residual, used, hist.total)


# -- dark counts ---------------------------------------------------------------

@dataclass(frozen=True)
class DarkCountBounds:
    d_min: float = 10.0
    d_max: float = 500.0

    def __post_init__(self):
        if not 0 <= self.d_min < self.d_max:
            raise ValueError("dark-count bounds need 0 <= d_min < d_max")

    def contains(self, rate: float) -> bool:
        return self.d_min <= rate <= self.d_max


@dataclass
class DarkCountReport(Report):
    rates: dict[str, float]
    bounds: tuple[float, float]
    dwell: float
    passed: bool


def check_dark_counts(net: Network, bounds: DarkCountBounds, dwell: float = 1.0,
                      raise_on_fail: bool = True) -> DarkCountReport:
    """Block the source, count each detector, and abort if any rate is out of bounds."""
    prev = net.eps.call("eps.get_status")["mode"]
    net.eps.call("eps.set_mode", {"mode": "off"})
    try:
        rates = {s: net.singles(s, dwell) / dwell for s in net.sites}
    finally:
        net.eps.call("eps.set_mode", {"mode": prev})
    bad = {s: r for s, r in rates.items() if not bounds.contains(r)}
    report = DarkCountReport(rates, (bounds.d_min, bounds.d_max), dwell, not bad)
    if bad and raise_on_fail:
        raise DarkCountAbort(bad, bounds)
    return report


# -- EPS calibration -----------------------------------------------------------

def select_operating_point(alphas, car, target_fraction: float) -> tuple[int, float, float]:
    """Index of the grid point whose CAR is closest to ``f·CAR_max``.

    NaN entries are ignored.  Ties (within float rounding) go to the smaller
    attenuation.  Returns ``(index, car_max, car_target)``.
    """
    alphas = np.asarray(alphas, float)
    car = np.asarray(car, float)
    valid = np.isfinite(car)
    if not valid.any():
        raise CalibrationFailure("CAR undefined at every grid point")
    car_max = float(np.max(car[valid]))
    target = target_fraction * car_max
    dist = np.where(valid, np.abs(car - target), np.inf)
    best = float(np.min(dist))
    ties = np.nonzero(dist <= best + 1e-12 * max(1.0, abs(target)))[0]
    idx = int(ties[np.argmin(alphas[ties])])
    return idx, car_max, target


@dataclass
class CalibrationScan(Report):
    attenuations: list[float]
    coincidences: list[float]  # counts/s
    accidentals: list[float]  # counts/s
    car: list[float]
    dwell: list[float]
    car_max: float
    alpha_at_max: float
    target_fraction: float
    car_target: float
    alpha_star: float
    c_star: float
    a_star: float
    car_star: float
    window_ps: int


def measure_car(net: Network, dwell: float, window: int, min_coincidences: int = 0, max_dwell: float | None = None,
                target_accidentals: int = 10_000, max_delay_windows: int = 400,
                pulse_period: int | None = None) -> tuple[float, float, float]:
    """Coincidence and accidental rates at the current source setting.

    Accidentals are the mean over delayed windows placed at whole pump-pulse
    multiples on both sides of the true delay, so same-pulse multipair events
    are excluded and the background estimate is averaged down.
    """
    if net.offset is None:
        raise ControlError("sites must be synchronized before counting coincidences")
    a, b = net.sites
    if pulse_period is None:
        pulse_period = int(net.eps.call("eps.get_status")["pulse_period_ps"])
    max_dwell = dwell if max_dwell is None else max(max_dwell, dwell)
    signal, idler, total, c = [], [], 0.0, 0
    step = dwell
    while True:
        streams = net.acquire(step)
        signal.append(streams[a].channel(DETECTOR_CH))
        idler.append(streams[b].channel(DETECTOR_CH) - net.offset)
        total += step
        c += tt.count_pairs(signal[-1], idler[-1], window, 0)
        if c >= min_coincidences or total >= max_dwell - 1e-12:
            break
        want = total * (min_coincidences / max(c, 1) - 1.0) * 1.05
        step = float(min(max(want, 0.1 * dwell), max_dwell - total))
    sig, idl = np.concatenate(signal), np.concatenate(idler)
    k0 = window // pulse_period + 1
    first = tt.delayed_window_counts(sig, idl, window, [k0 * pulse_period, -k0 * pulse_period])
    n_windows = 2
    if first.sum() < target_accidentals:
        # enough symmetric pairs of delayed windows to reach the target count
        need = target_accidentals / max(first.sum() / 2.0, 0.5)
        n_windows = int(min(max(2 * math.ceil(need / 2.0), 2), max_delay_windows))
    ks = np.arange(k0, k0 + n_windows // 2 + n_windows % 2)
    delays = np.concatenate([ks, -ks]) * pulse_period
    acc = int(tt.delayed_window_counts(sig, idl, window, delays).sum())
    n_windows = delays.size
    return c / total, acc / n_windows / total, total


def calibrate_eps(net: Network, grid=DEFAULT_GRID, target_fraction: float = 0.85, dwell: float = 1.0,
                  window: int = 500, min_coincidences: int = 0, max_dwell: float | None = None,
                  target_accidentals: int = 10_000, basis: str = "H") -> CalibrationScan:
    """Sweep pump attenuation, measure C and A, and park the source at α*."""
    grid = [float(x) for x in grid]
    if not grid:
        raise CalibrationFailure("empty attenuation grid")
    net.eps.call("eps.set_mode", {"mode": "pairs"})
    for s in net.sites:
        net.pa(s).call("pa.set_basis", {"label": basis})
    period = int(net.eps.call("eps.get_status")["pulse_period_ps"])
    cs, as_, cars, dwells = [], [], [], []
    for alpha in grid:
        net.eps.call("eps.set_attenuation", {"attenuation": alpha})
        c, acc, t = measure_car(net, dwell, window, min_coincidences, max_dwell, target_accidentals,
                                pulse_period=period)
        cs.append(c)
        as_.append(acc)
        cars.append(c / acc if acc > 0 else float("nan"))
        dwells.append(t)
    idx, car_max, target = select_operating_point(grid, cars, target_fraction)
    net.eps.call("eps.set_attenuation", {"attenuation": grid[idx]})
    i_max = int(np.nanargmax(np.asarray(cars, float)))
    return CalibrationScan(grid, cs, as_, cars, dwells, car_max, grid[i_max], target_fraction, target,
                           grid[idx], cs[idx], as_[idx], cars[idx], int(window))


# -- polarization drift compensation -------------------------------------------

@dataclass(frozen=True)
class ScanParams:
    step: float
    half_window: float
    center: float

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("scan step must be positive")
        if self.half_window < self.step:
            raise ValueError("scan half-window must be at least one step")

    def grid(self) -> np.ndarray:
        """θ_c−w … θ_c+w in steps of s, clamped to [0, 2π] (no wrapping)."""
        n = int(math.floor(self.half_window / self.step + 1e-9))
        g = self.center + self.step * np.arange(-n, n + 1)
        g = g[(g >= -1e-12) & (g <= 2 * np.pi + 1e-12)]
        return np.clip(g, 0.0, 2 * np.pi)


@dataclass
class WaveplateScan(Report):
    site: str
    plate: int
    basis: str
    center: float
    grid: list[float]
    counts: list[int]
    theta_star: float
    minimum: int


def pick_minimum(grid, counts, center: float, tie_sigma: float = 0.0) -> int:
    """argmin of counts; ties go to the grid point nearest the centre, then the smaller angle.

    With ``tie_sigma > 0`` every point within ``tie_sigma·√min`` of the minimum
    counts as tied.
    """
    grid = np.asarray(grid, float)
    counts = np.asarray(counts)
    lowest = counts.min()
    ties = np.nonzero(counts <= lowest + tie_sigma * math.sqrt(max(lowest, 1)))[0]
    order = sorted(ties, key=lambda i: (abs(grid[i] - center), grid[i]))
    return int(order[0])


def fit_malus(grid, counts) -> tuple[np.ndarray, float, float]:
    """Least-squares ``a + b·cosθ + c·sinθ`` through a retardance scan.

    A single retarder's transmitted intensity is exactly sinusoidal in its
    retardance.  Returns ``(fitted values on grid, amplitude, amplitude std error)``.
    """
    grid = np.asarray(grid, float)
    y = np.asarray(counts, float)
    X = np.column_stack([np.ones_like(grid), np.cos(grid), np.sin(grid)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    amp = float(np.hypot(coef[1], coef[2]))
    # Poisson variance of each point ~ its fitted mean; propagate to the amplitude
    fitted = X @ coef
    sigma2 = np.maximum(fitted, 1.0)
    cov = np.linalg.pinv(X.T @ (X / sigma2[:, None]))
    u = np.array([0.0, coef[1], coef[2]]) / max(amp, 1e-300)
    return fitted, amp, float(np.sqrt(max(u @ cov @ u, 0.0)))


def locate_minimum(grid, counts, center: float, n_sigma: float = 3.0, method: str = "fit") -> int:
    """Grid index of the singles minimum.

    ``method="fit"`` (default) takes the argmin of the fitted Malus curve when
    its modulation is significant at ``n_sigma``, and otherwise treats the scan as
    flat and keeps the grid point nearest the centre.  ``method="raw"`` is the
    plain argmin of the counts.
    """
    if method == "raw":
        return pick_minimum(grid, counts, center)
    grid = np.asarray(grid, float)
    if grid.size < 3:
        return pick_minimum(grid, counts, center)
    fitted, amp, err = fit_malus(grid, counts)
    if amp <= n_sigma * err:
        return pick_minimum(grid, np.zeros(grid.size), center)
    return pick_minimum(grid, np.round(fitted, 9), center)


def minimize_waveplate(net: Network, site: str, plate: int, scan: ScanParams, prep_basis: str,
                       dwell: float = 1.0, prepare_source: bool = True, method: str = "fit",
                       n_sigma: float = 3.0) -> WaveplateScan:
    """Scan one plate across the window, leave it at the singles minimum."""
    if prepare_source:
        net.eps.call("eps.set_mode", {"mode": "alignment", "basis": prep_basis})
    pa = net.pa(site)
    grid = scan.grid()
    counts = []
    try:
        for theta in grid:
            pa.call("pa.set_waveplate", {"index": plate, "retardance": float(theta)})
            counts.append(net.singles(site, dwell))
    except Exception:
        try:
            pa.call("pa.set_waveplate", {"index": plate, "retardance": float(scan.center)})
        except Exception:  # best effort; the original failure is what matters
            log.exception("could not restore %s plate %d", site, plate)
        raise
    i = locate_minimum(grid, counts, scan.center, n_sigma, method)
    pa.call("pa.set_waveplate", {"index": plate, "retardance": float(grid[i])})
    return WaveplateScan(site, plate, prep_basis, float(scan.center), grid.tolist(), counts, float(grid[i]),
                         int(counts[i]))


@dataclass
class CompensationReport(Report):
    site: str
    initial: list[float]
    final: list[float]
    rounds: int
    converged: bool
    min_h: float  # orthogonal-port singles rate, |H⟩ preparation
    min_d: float
    dark_rate: float | None
    already_aligned: bool
    scans: list[dict] = field(default_factory=list)

    @property
    def max_change(self) -> float:
        return float(np.max(np.abs(np.subtract(self.final, self.initial))))


def _leaks(net: Network, site: str, dwell: float) -> tuple[float, float]:
    """Orthogonal-port singles rates for |H⟩ (WP3 neutral) and |D⟩ (WP3 quarter wave)."""
    pa = net.pa(site)
    net.eps.call("eps.set_mode", {"mode": "alignment", "basis": "H"})
    pa.call("pa.set_waveplate", {"index": 3, "retardance": 0.0})
    h = net.singles(site, dwell) / dwell
    net.eps.call("eps.set_mode", {"mode": "alignment", "basis": "D"})
    pa.call("pa.set_waveplate", {"index": 3, "retardance": QUARTER_WAVE})
    d = net.singles(site, dwell) / dwell
    pa.call("pa.set_waveplate", {"index": 3, "retardance": 0.0})
    return h, d


def _set_plates(net: Network, site: str, plates) -> None:
    for i, r in enumerate(plates):
        net.pa(site).call("pa.set_waveplate", {"index": i, "retardance": float(r)})


def _round(net, site, plates, coarse, coarse_step, step, half_window, dwell, scans):
    pa = net.pa(site)
    sweep = []
    for plate, basis in ((2, "D"), (1, "H"), (0, "H")):
        # D-preparation sees WP3 at quarter wave; H-preparation sees it neutral
        wp3 = QUARTER_WAVE if basis == "D" else 0.0
        pa.call("pa.set_waveplate", {"index": 3, "retardance": wp3})
        if coarse:
            params = ScanParams(coarse_step, 2 * np.pi, plates[plate])  # whole range, anchored at the current value
        else:
            params = ScanParams(step, half_window, plates[plate])
        res = minimize_waveplate(net, site, plate, params, basis, dwell)
        plates[plate] = res.theta_star
        sweep.append(res)
        scans.append(res.to_dict())
    return sweep[0].minimum, sweep[2].minimum


def _align_site(net: Network, site: str, step: float, half_window: float, dwell: float, max_rounds: int,
                coarse_step: float | None, n_sigma: float, dark_rate: float | None,
                restarts: int = 2) -> CompensationReport:
    pa = net.pa(site)
    start = [float(x) for x in pa.call("pa.get_alignment")["aligned_retardances"]]
    _set_plates(net, site, start)
    if dark_rate is None:
        net.eps.call("eps.set_mode", {"mode": "off"})
        dark_rate = net.singles(site, dwell) / dwell
    # acceptable orthogonal-port level: twice the dark rate, plus counting noise
    accept = 2.0 * dark_rate + n_sigma * math.sqrt(max(dark_rate, 1.0) / dwell)
    min_h, min_d = _leaks(net, site, dwell)
    scans: list[dict] = []
    plates = list(start)
    rounds, converged = 0, False
    if max(min_h, min_d) <= accept:
        pa.call("pa.commit_alignment")
        return CompensationReport(site, start, plates, 0, True, min_h, min_d, dark_rate, True, scans)

    best = (math.inf, list(plates))
    for attempt in range(restarts + 1):
        coarse = coarse_step is not None
        prev = None
        converged = False
        fine = 0
        while fine < max_rounds:
            rounds += 1
            fine += 0 if coarse else 1
            before = list(plates)
            mins = _round(net, site, plates, coarse, coarse_step, step, half_window, dwell, scans)
            if coarse:
                # stay coarse until a full-range pass stops relocating plates
                coarse = (float(np.max(np.abs(np.subtract(plates, before)))) > half_window
                          and rounds - fine < MAX_COARSE_ROUNDS)
                prev = None if coarse else mins
                continue
            if prev is not None:
                eps_d = n_sigma * math.sqrt(max(prev[0], 1))
                eps_h = n_sigma * math.sqrt(max(prev[1], 1))
                if abs(mins[0] - prev[0]) < eps_d and abs(mins[1] - prev[1]) < eps_h:
                    converged = True
                    break
            prev = mins
        min_h, min_d = _leaks(net, site, dwell)
        if min_h + min_d < best[0]:
            best = (min_h + min_d, list(plates))
        if max(min_h, min_d) <= accept:
            break
        # stalled (typically WP1 parked where WP0 has no effect on the H port): kick WP0 and rescan
        log.info("%s: alignment stalled at H=%.0f/s D=%.0f/s, restarting", site, min_h, min_d)
        plates = list(plates)
        plates[0] = (plates[0] + np.pi / 2) % (2 * np.pi)
        _set_plates(net, site, plates)
    if list(plates) != best[1]:
        plates = best[1]
        _set_plates(net, site, plates)
        min_h, min_d = _leaks(net, site, dwell)
    pa.call("pa.commit_alignment")
    final = [float(x) for x in pa.call("pa.get_waveplates")[:3]]
    if not converged:
        log.warning("%s: drift compensation did not converge; keeping best settings found", site)
    change = float(np.max(np.abs(np.subtract(final, start))))
    return CompensationReport(site, start, final, rounds, converged, min_h, min_d, dark_rate,
                              change <= step + 1e-9, scans)


def compensate_polarization_drift(net: Network, sites=None, step: float = 2 * DEG, half_window: float = 30 * DEG,
                                  dwell: float = 1.0, max_rounds: int = 5, coarse_step: float | None = 10 * DEG,
                                  n_sigma: float = 3.0, dark_rates: dict | None = None) -> list[CompensationReport]:
    """Alignment routine on every PA: WP2 under |D⟩, then WP1 and WP0 under |H⟩, iterated.

    The source is left in pair mode afterwards and each PA's frame
    correction is committed so later basis settings include it.
    """
    sites = tuple(sites or net.sites)
    mode = net.eps.call("eps.get_status")["mode"]
    reports = []
    try:
        for s in sites:
            dark = None if dark_rates is None else dark_rates.get(s)
            reports.append(_align_site(net, s, step, half_window, dwell, max_rounds, coarse_step, n_sigma, dark))
    finally:
        net.eps.call("eps.set_mode", {"mode": mode if mode != "alignment" else "pairs"})
    return reports
