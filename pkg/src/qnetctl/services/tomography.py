"""Two-qubit polarization state tomography over the 36 product settings {H,V,D,A,R,L}²."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .. import polarization as pol
from ..control import Report
from ..network import Network
from .fringe import count_coincidences_now

log = logging.getLogger(__name__)

SETTINGS = tuple(itertools.product(pol.BASIS_LABELS, repeat=2))
_PAULI = (np.eye(2, dtype=complex), pol.SIGMA_X, pol.SIGMA_Y, pol.SIGMA_Z)
# Hermitian operator basis: ρ = Σ_k x_k P_k / 4, with P_0 = I⊗I so x_0 = Tr ρ
PAULI_BASIS = tuple(np.kron(a, b) for a in _PAULI for b in _PAULI)


class TomographyError(ValueError):
    pass


def design_matrix(settings) -> np.ndarray:
    """Rows: setting; columns: Tr[(Π_a⊗Π_b)·P_k]/4."""
    rows = []
    for a, b in settings:
        proj = np.kron(pol.projector(a), pol.projector(b))
        rows.append([np.real(np.trace(proj @ p)) / 4.0 for p in PAULI_BASIS])
    return np.array(rows)


def project_physical(rho: np.ndarray) -> np.ndarray:
    """Clamp negative eigenvalues to zero, taking the deficit proportionally from the
    positive ones, and renormalize to unit trace."""
    rho = 0.5 * (rho + rho.conj().T)
    w, v = np.linalg.eigh(rho)
    pos = np.clip(w, 0.0, None)
    if pos.sum() <= 0:
        raise TomographyError("reconstruction has no positive weight")
    deficit = -w[w < 0].sum()
    pos = pos - deficit * pos / pos.sum()
    pos = np.clip(pos, 0.0, None)
    pos /= pos.sum()
    out = (v * pos) @ v.conj().T
    return 0.5 * (out + out.conj().T)


def reconstruct_density_matrix(settings, counts) -> np.ndarray:
    """Linear least-squares state estimate followed by the physicality projection."""
    settings = [tuple(s) for s in settings]
    counts = np.asarray(counts, float)
    if len(settings) != counts.size:
        raise TomographyError("one count per setting required")
    if len(set(settings)) != len(settings):
        raise TomographyError("duplicate measurement settings make the design rank-deficient")
    for a, b in settings:
        if a not in pol.BASIS_LABELS or b not in pol.BASIS_LABELS:
            raise TomographyError(f"unknown setting {(a, b)}")
    if np.any(counts < 0) or counts.sum() <= 0:
        raise TomographyError("counts must be nonnegative with a positive total")
    X = design_matrix(settings)
    if np.linalg.matrix_rank(X) < len(PAULI_BASIS):
        raise TomographyError("measurement settings are not informationally complete")
    x, *_ = np.linalg.lstsq(X, counts, rcond=None)
    m = sum(xk * p for xk, p in zip(x, PAULI_BASIS)) / 4.0
    tr = float(np.real(np.trace(m)))
    if tr <= 0:
        raise TomographyError("reconstructed trace is not positive")
    return project_physical(m / tr)


@dataclass
class TomographyRecord(Report):
    settings: list = field(default_factory=lambda: [list(s) for s in SETTINGS])
    counts: list = field(default_factory=list)
    dwell: float = 0.0
    rho: np.ndarray | None = None
    fidelity: float = float("nan")
    concurrence: float = float("nan")
    reconfigurations: int = 0
    complete: bool = True
    error: str = ""

    def to_dict(self) -> dict:
        out = {"routine": "TomographyRecord", "settings": [list(s) for s in self.settings],
               "counts": [int(c) for c in self.counts], "dwell": self.dwell,
               "fidelity": self.fidelity, "concurrence": self.concurrence,
               "reconfigurations": self.reconfigurations, "complete": self.complete, "error": self.error}
        if self.rho is not None:
            out["rho"] = density_matrix_json(self.rho)
        return out


def density_matrix_json(rho: np.ndarray) -> dict:
    rho = np.asarray(rho, complex)
    return {"real": rho.real.tolist(), "imag": rho.imag.tolist(), "basis": ["HH", "HV", "VH", "VV"]}


def record_from_counts(counts, dwell: float = 0.0, settings=SETTINGS, target="phi+") -> TomographyRecord:
    rho = reconstruct_density_matrix(settings, counts)
    return TomographyRecord([list(s) for s in settings], list(counts), dwell, rho, pol.fidelity(rho, target),
                            pol.concurrence(rho))


def run_qst(net: Network, dwell: float = 1.0, window: int = 500, target: str = "phi+") -> TomographyRecord:
    """Measure all 36 settings through the agents and reconstruct ρ.

    Individual agent calls already retry per the client's policy; a setting
    that still fails aborts the run and the partial record is returned.
    """
    if dwell <= 0:
        raise ValueError("dwell must be positive")
    p1, p2 = net.pa(net.sites[0]), net.pa(net.sites[1])
    counts = []
    reconfig = 0
    current = (None, None)
    for a, b in SETTINGS:
        try:
            if current[0] != a:
                p1.call("pa.set_basis", {"label": a})
                reconfig += 4
            if current[1] != b:
                p2.call("pa.set_basis", {"label": b})
                reconfig += 4
            current = (a, b)
            c, _ = count_coincidences_now(net, dwell, window)
        except Exception as exc:
            log.error("QST aborted at setting %s%s: %s", a, b, exc)
            return TomographyRecord([list(s) for s in SETTINGS[: len(counts)]], counts, dwell,
                                    reconfigurations=reconfig, complete=False, error=str(exc))
        counts.append(c)
    rec = record_from_counts(counts, dwell, SETTINGS, target)
    rec.reconfigurations = reconfig
    return rec
