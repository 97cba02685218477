"""Two-photon interference: sweep one analyzer, count coincidences, fit fringes."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .. import timetags as tt
from ..control import ControlError, Report
from ..network import Network
from ..photonics import DETECTOR_CH
from ..rpc.client import RemoteError, TransportError

log = logging.getLogger(__name__)

TPI_BASES = ("H", "V", "R", "L")
SWEEP_PLATE = 3


@dataclass
class FringeDataset:
    basis: str
    theta: np.ndarray
    counts: np.ndarray
    dwell: float
    accidentals: np.ndarray | None = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, float)
        self.counts = np.asarray(self.counts)
        if self.theta.shape != self.counts.shape:
            raise ValueError("theta and counts must have the same length")
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")
        if np.any(np.diff(self.theta) <= 0):
            raise ValueError("theta must be strictly increasing")


@dataclass(frozen=True)
class FringeFit:
    A: float
    B: float
    C: float
    D: float
    visibility: float
    ok: bool = True
    message: str = ""

    def model(self, theta) -> np.ndarray:
        return self.A * np.sin(self.B * np.asarray(theta, float) + self.C) + self.D

    def to_dict(self) -> dict:
        def clean(x):
            return x if math.isfinite(x) else None
        return {"A": clean(self.A), "B": clean(self.B), "C": clean(self.C), "D": clean(self.D),
                "visibility": clean(self.visibility), "ok": self.ok, "message": self.message}


def _sinusoid(p, theta):
    return p[0] * np.sin(p[1] * theta + p[2]) + p[3]


def _initial_guess(theta: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Frequency and phase from the dominant discrete-Fourier component."""
    d0 = float(np.mean(y))
    a0 = 0.5 * float(np.max(y) - np.min(y))
    n = theta.size
    span = (theta[-1] - theta[0]) * n / max(n - 1, 1)  # grid treated as one sampled period
    ks = np.arange(1, max(n // 2, 1) + 1)
    freqs = 2 * np.pi * ks / span
    z = (y - d0) @ np.exp(-1j * np.outer(theta, freqs))
    k = int(np.argmax(np.abs(z)))
    b0 = float(freqs[k])
    # y - D ≈ A sin(Bθ + C)  ⇒  Σ (y-D) e^{-iBθ} ≈ (N A / 2i) e^{iC}
    c0 = float(np.angle(z[k]) + np.pi / 2)
    return np.array([a0, b0, c0, d0])


def _normalize(a: float, b: float, c: float) -> tuple[float, float, float]:
    if b < 0:  # A sin(-|B|θ + C) = -A sin(|B|θ - C)
        a, b, c = -a, -b, -c
    if a < 0:
        a, c = -a, c + np.pi
    return a, b, c % (2 * np.pi)


def fit_fringe(theta, counts) -> FringeFit:
    """Fit ``I(θ) = A·sin(Bθ + C) + D``; visibility ``|A|/D`` (NaN when ``D ≤ 0``)."""
    theta = np.asarray(theta, float)
    y = np.asarray(counts, float)
    if theta.size < 8:
        raise ValueError("fringe fit needs at least 8 points")
    p0 = _initial_guess(theta, y)
    scale = max(float(np.max(np.abs(y))), 1.0)
    try:
        res = least_squares(lambda p: (_sinusoid(p, theta) - y) / scale, p0, method="lm", xtol=1e-12,
                            ftol=1e-12, gtol=1e-12, max_nfev=2000)
    except Exception as exc:  # pragma: no cover - scipy failure modes
        return FringeFit(*(float("nan"),) * 5, ok=False, message=f"fit failed: {exc}")
    a, b, c, d = (float(v) for v in res.x)
    if not (res.success and np.all(np.isfinite(res.x))):
        return FringeFit(a, b, c, d, float("nan"), ok=False, message=f"fit diverged: {res.message}")
    a, b, c = _normalize(a, b, c)
    vis = abs(a) / d if d > 0 else float("nan")
    msg = "" if d > 0 else "fitted offset D <= 0"
    return FringeFit(a, b, c, d, vis, True, msg)


def fit_dataset(d: FringeDataset) -> FringeFit:
    return fit_fringe(d.theta, d.counts)


def default_grid(points: int = 16) -> np.ndarray:
    return np.linspace(0.0, 2 * np.pi, points, endpoint=False)


@dataclass
class TPIResult(Report):
    datasets: list = field(default_factory=list)  # list[FringeDataset]
    complete: bool = True
    failed_at: tuple | None = None  # (basis, index)
    error: str = ""

    def fits(self) -> dict[str, FringeFit]:
        return {d.basis: fit_dataset(d) for d in self.datasets if d.counts.size >= 8}

    def visibilities(self) -> dict[str, float]:
        return {b: f.visibility for b, f in self.fits().items()}

    def to_dict(self) -> dict:
        return {"routine": "TPIResult", "complete": self.complete, "failed_at": self.failed_at, "error": self.error,
                "datasets": [{"basis": d.basis, "theta": d.theta.tolist(), "counts": d.counts.tolist(),
                              "dwell": d.dwell} for d in self.datasets],
                "fits": {b: f.to_dict() for b, f in self.fits().items()}}


def count_coincidences_now(net: Network, dwell: float, window: int, accidental_delay: int | None = None):
    """One coordinated acquisition → (coincidences, accidentals in one delayed window)."""
    if net.offset is None:
        raise ControlError("sites must be synchronized before counting coincidences")
    a, b = net.sites
    streams = net.acquire(dwell)
    sig = streams[a].channel(DETECTOR_CH)
    idl = streams[b].channel(DETECTOR_CH) - net.offset
    c = tt.count_pairs(sig, idl, window, 0)
    acc = tt.count_pairs(sig, idl, window, accidental_delay) if accidental_delay else 0
    return c, acc


def run_tpi(net: Network, bases=TPI_BASES, grid=None, dwell: float = 1.0, window: int = 500,
            resume: TPIResult | None = None) -> TPIResult:
    """PA1 fixed on each basis while PA2's last plate sweeps ``grid``.

    A transport or agent failure returns a partial result flagged incomplete;
    pass it back as ``resume`` to continue from the failed point.
    """
    if dwell <= 0:
        raise ValueError("dwell must be positive (zero dwell yields no counts)")
    grid = default_grid() if grid is None else np.asarray(grid, float)
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("TPI grid must be nonempty and strictly increasing")
    status = net.eps.call("eps.get_status")
    period = int(status["pulse_period_ps"])
    acc_delay = (window // period + 5) * period
    result = TPIResult()
    done: dict[str, tuple[list, list]] = {}
    if resume is not None:
        for d in resume.datasets:
            done[d.basis] = (list(d.counts), list(d.accidentals if d.accidentals is not None else []))
    p1, p2 = net.pa(net.sites[0]), net.pa(net.sites[1])
    for basis in bases:
        counts, accs = done.get(basis, ([], []))
        try:
            if len(counts) < grid.size:
                p1.call("pa.set_basis", {"label": basis})
                p2.call("pa.set_basis", {"label": basis})
            for i in range(len(counts), grid.size):
                p2.call("pa.set_waveplate", {"index": SWEEP_PLATE, "retardance": float(grid[i])})
                c, acc = count_coincidences_now(net, dwell, window, acc_delay)
                counts.append(c)
                accs.append(acc)
        except (TransportError, RemoteError) as exc:
            log.error("TPI interrupted at basis %s point %d: %s", basis, len(counts), exc)
            result.datasets.append(FringeDataset(basis, grid[: len(counts)], np.array(counts, dtype=np.int64),
                                                 dwell, np.array(accs, dtype=np.int64)))
            result.complete = False
            result.failed_at = (basis, len(counts))
            result.error = str(exc)
            return result
        result.datasets.append(FringeDataset(basis, grid, np.array(counts, dtype=np.int64), dwell,
                                             np.array(accs, dtype=np.int64)))
    return result


def fringe_csv(result: TPIResult, header: dict | None = None) -> str:
    """Rows of ``basis,theta,counts,accidentals``; ``header`` items become leading comment lines."""
    lines = [f"# {k}: {v}" for k, v in (header or {}).items()]
    lines.append("basis,theta,counts,accidentals")
    for d in result.datasets:
        accs = d.accidentals if d.accidentals is not None else np.zeros_like(d.counts)
        for t, c, a in zip(d.theta, d.counts, accs):
            lines.append(f"{d.basis},{t:.12g},{int(c)},{int(a)}")
    return "\n".join(lines) + "\n"
