"""Continuous entanglement-distribution service: periodic TPI with automatic realignment."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .. import control as ctl
from ..network import Network
from ..rpc.client import RemoteError, TransportError
from .fringe import TPI_BASES, default_grid, run_tpi

log = logging.getLogger(__name__)

HOUR = 3600.0


@dataclass(frozen=True)
class ServiceConfig:
    run_time: float = 12 * HOUR  # seconds of (uncompressed) service time
    interval: float = 1 * HOUR  # Δt between TPI measurements
    threshold_mode: str = "per-basis"  # per-basis | average
    threshold: float | str = "auto"  # number, or "auto" (0.9 × reference visibility)
    auto_fraction: float = 0.9
    dark_bounds: ctl.DarkCountBounds = ctl.DarkCountBounds()
    time_compression: float = 1.0  # virtual seconds = service seconds / compression
    tpi_points: int = 16
    tpi_dwell: float = 1.0
    window: int = 500
    dark_dwell: float = 1.0
    calibrate: bool = True

    def __post_init__(self):
        if not self.interval > 0:
            raise ValueError("interval must be positive")
        if not self.run_time > self.interval:
            raise ValueError("run_time must exceed the interval")
        if self.threshold_mode not in ("per-basis", "average"):
            raise ValueError("threshold_mode must be 'per-basis' or 'average'")
        if isinstance(self.threshold, str) and self.threshold != "auto":
            raise ValueError("threshold must be a number or 'auto'")
        if self.time_compression <= 0:
            raise ValueError("time_compression must be positive")

    @property
    def iterations(self) -> int:
        return int(math.floor(self.run_time / self.interval + 1e-9))

    @property
    def virtual_interval(self) -> float:
        return self.interval / self.time_compression


class VirtualClock:
    """Service clock backed by the simulator's virtual time."""

    def __init__(self, net: Network):
        self.net = net

    def now(self) -> float:
        return self.net.virtual_time()

    def wait_until(self, t: float) -> None:
        dt = t - self.now()
        if dt > 0:
            self.net.sim.call("sim.advance", {"seconds": dt})


class WallClock:
    def now(self) -> float:
        return time.monotonic()

    def wait_until(self, t: float) -> None:
        dt = t - self.now()
        if dt > 0:
            time.sleep(dt)


@dataclass
class IterationRecord:
    index: int
    slot_time: float
    start_time: float
    end_time: float
    visibilities: dict
    fits: dict
    threshold: dict
    below: list
    recalibrated: bool
    compensation: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return ctl._jsonable(self.__dict__)


@dataclass
class RunRecord:
    config: dict
    status: str = "running"  # completed | dark_count_abort | calibration_failure | transport_failure | error
    message: str = ""
    setup: dict = field(default_factory=dict)
    iterations: list = field(default_factory=list)
    thresholds: dict = field(default_factory=dict)

    @property
    def recalibrations(self) -> int:
        return sum(1 for it in self.iterations if it.recalibrated)

    def to_dict(self) -> dict:
        return ctl._jsonable({"config": self.config, "status": self.status, "message": self.message,
                              "setup": self.setup, "thresholds": self.thresholds,
                              "recalibrations": self.recalibrations,
                              "iterations": [it.to_dict() for it in self.iterations]})

    def to_jsonl(self, extra: dict | None = None) -> str:
        extra = extra or {}
        return "".join(json.dumps({**extra, **it.to_dict()}) + "\n" for it in self.iterations)


def below_threshold(vis: dict, thresholds: dict, mode: str) -> list:
    """Bases that trigger realignment.  Per-basis: any 𝒱_b < threshold_b or NaN.
    Average: mean 𝒱 < V_th (NaN propagates to a trigger); returns ["average"]."""
    if mode == "average":
        v = np.array(list(vis.values()), float)
        avg = float(np.mean(v)) if v.size else float("nan")
        return ["average"] if not (avg >= thresholds["average"]) else []
    return [b for b, v in vis.items() if not (v >= thresholds[b])]


def make_thresholds(cfg: ServiceConfig, reference: dict | None) -> dict:
    if cfg.threshold != "auto":
        value = float(cfg.threshold)
        return {"average": value} if cfg.threshold_mode == "average" else {b: value for b in TPI_BASES}
    if reference is None or any(not np.isfinite(v) for v in reference.values()):
        raise ctl.CalibrationFailure("reference TPI gave no usable visibilities for the auto threshold")
    if cfg.threshold_mode == "average":
        return {"average": cfg.auto_fraction * float(np.mean(list(reference.values())))}
    return {b: cfg.auto_fraction * float(v) for b, v in reference.items()}


def entanglement_service(net: Network, cfg: ServiceConfig, clock=None, config_snapshot: dict | None = None,
                         calibration_kwargs: dict | None = None, compensation_kwargs: dict | None = None,
                         on_iteration=None, before_iteration=None) -> RunRecord:
    """Initialize, gate on dark counts, align, calibrate, then loop TPI every Δt.

    A recalibration takes the place of that iteration's wait, so a run with no
    aborts always has ``floor(run_time/Δt)`` iterations.  Failures stop the
    service and return the record collected so far.  ``before_iteration(k)``
    runs after the wait and before iteration ``k`` (1-based) measures.
    """
    clock = clock or (VirtualClock(net) if "sim" in net.clients else WallClock())
    rec = RunRecord(config_snapshot or {})
    grid = default_grid(cfg.tpi_points)
    comp_kw = dict(compensation_kwargs or {})
    try:
        if net.offset is None:
            rec.setup["sync"] = ctl.synchronize_sites(net).to_dict()
        try:
            dark = ctl.check_dark_counts(net, cfg.dark_bounds, cfg.dark_dwell)
        except ctl.DarkCountAbort as exc:
            rec.status, rec.message = "dark_count_abort", str(exc)
            return rec
        rec.setup["dark_counts"] = dark.to_dict()
        comp_kw.setdefault("dark_rates", dark.rates)
        rec.setup["compensation"] = [r.to_dict() for r in ctl.compensate_polarization_drift(net, **comp_kw)]
        if cfg.calibrate:
            cal = ctl.calibrate_eps(net, window=cfg.window, **(calibration_kwargs or {}))
            rec.setup["calibration"] = cal.to_dict()
        reference = None
        if cfg.threshold == "auto":
            ref = run_tpi(net, TPI_BASES, grid, cfg.tpi_dwell, cfg.window)
            reference = ref.visibilities()
            rec.setup["reference_visibilities"] = reference
        rec.thresholds = make_thresholds(cfg, reference)

        start = clock.now()
        dt = cfg.virtual_interval
        for k in range(cfg.iterations):
            slot = start + k * dt
            clock.wait_until(slot)  # the previous iteration's Wait(Δt)
            if before_iteration is not None:
                before_iteration(k + 1)
            t0 = clock.now()
            tpi = run_tpi(net, TPI_BASES, grid, cfg.tpi_dwell, cfg.window)
            if not tpi.complete:
                raise TransportError(f"TPI incomplete: {tpi.error}")
            fits = tpi.fits()
            vis = {b: f.visibility for b, f in fits.items()}
            below = below_threshold(vis, rec.thresholds, cfg.threshold_mode)
            comp = []
            if below:
                log.info("iteration %d: %s below threshold, realigning", k + 1, below)
                comp = [r.to_dict() for r in ctl.compensate_polarization_drift(net, **comp_kw)]
            it = IterationRecord(k + 1, slot, t0, clock.now(), vis, {b: f.to_dict() for b, f in fits.items()},
                                 dict(rec.thresholds), below, bool(below), comp, time.time())
            rec.iterations.append(it)
            if on_iteration is not None:
                on_iteration(it)
        clock.wait_until(start + cfg.iterations * dt)
        rec.status = "completed"
    except ctl.CalibrationFailure as exc:
        rec.status, rec.message = "calibration_failure", str(exc)
    except TransportError as exc:
        rec.status, rec.message = "transport_failure", str(exc)
    except (ctl.ControlError, RemoteError) as exc:
        rec.status, rec.message = "error", str(exc)
    return rec
