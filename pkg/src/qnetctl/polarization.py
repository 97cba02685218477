"""Polarization-qubit algebra: basis states, waveplates, analyzers and two-qubit metrics.

Conventions
-----------
* Single-photon states are Jones vectors ``(H, V)``.
* ``D = (H+V)/√2``, ``A = (H-V)/√2``, ``R = (H+iV)/√2``, ``L = (H-iV)/√2``.
* Two-qubit matrices use the ordered product basis ``HH, HV, VH, VV``.
* An analyzer is four variable retarders with fixed axes ``[0, π/4, 0, π/4]``
  followed by a polarizer transmitting ``H``.  Light passes WP0 first, so the
  net unitary is ``J3 @ J2 @ J1 @ J0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SQRT2 = np.sqrt(2.0)
TWO_PI = 2.0 * np.pi

BASIS_LABELS = ("H", "V", "D", "A", "R", "L")
ORTHOGONAL = {"H": "V", "V": "H", "D": "A", "A": "D", "R": "L", "L": "R"}
PLATE_AXES = (0.0, np.pi / 4, 0.0, np.pi / 4)

_STATES = {
    "H": np.array([1.0, 0.0], dtype=complex),
    "V": np.array([0.0, 1.0], dtype=complex),
    "D": np.array([1.0, 1.0], dtype=complex) / SQRT2,
    "A": np.array([1.0, -1.0], dtype=complex) / SQRT2,
    "R": np.array([1.0, 1.0j], dtype=complex) / SQRT2,
    "L": np.array([1.0, -1.0j], dtype=complex) / SQRT2,
}

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)


def basis_state(label: str) -> np.ndarray:
    """Return the unit Jones vector for one of ``H, V, D, A, R, L``."""
    try:
        return _STATES[label].copy()
    except KeyError:
        raise ValueError(f"unknown polarization label {label!r}; expected one of {BASIS_LABELS}") from None


def projector(label_or_state) -> np.ndarray:
    psi = basis_state(label_or_state) if isinstance(label_or_state, str) else np.asarray(label_or_state, dtype=complex)
    return np.outer(psi, psi.conj())


@dataclass(frozen=True)
class Waveplate:
    axis_angle: float
    retardance: float = 0.0


@dataclass(frozen=True)
class AnalyzerState:
    plates: tuple[Waveplate, ...] = field(
        default_factory=lambda: tuple(Waveplate(a, 0.0) for a in PLATE_AXES)
    )

    def __post_init__(self):
        if len(self.plates) != 4:
            raise ValueError("an analyzer has exactly four waveplates")

    @classmethod
    def from_retardances(cls, retardances) -> "AnalyzerState":
        retardances = list(retardances)
        if len(retardances) != 4:
            raise ValueError("expected four retardances")
        return cls(tuple(Waveplate(a, float(r)) for a, r in zip(PLATE_AXES, retardances)))

    @property
    def retardances(self) -> tuple[float, ...]:
        return tuple(p.retardance for p in self.plates)


def _rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]], dtype=complex)


def waveplate_unitary(plate: Waveplate) -> np.ndarray:
    """Jones matrix ``R(φ) · diag(1, e^{iδ}) · R(-φ)`` of a variable retarder."""
    core = np.diag([1.0, np.exp(1j * plate.retardance)]).astype(complex)
    return _rotation(plate.axis_angle) @ core @ _rotation(-plate.axis_angle)


def analyzer_unitary(analyzer: AnalyzerState) -> np.ndarray:
    u = np.eye(2, dtype=complex)
    for plate in analyzer.plates:
        u = waveplate_unitary(plate) @ u
    return u


def _retarder_product(r0: float, r1: float, r2: float) -> np.ndarray:
    return (
        waveplate_unitary(Waveplate(PLATE_AXES[2], r2))
        @ waveplate_unitary(Waveplate(PLATE_AXES[1], r1))
        @ waveplate_unitary(Waveplate(PLATE_AXES[0], r0))
    )


def solve_retardances(target: np.ndarray) -> tuple[float, float, float]:
    """Find WP0–WP2 retardances whose product equals ``target`` up to a global phase.

    The axis sequence 0, π/4, 0 acts as a Z–X–Z Euler decomposition of SU(2),
    so every 2×2 unitary is reachable.  Returned values lie in ``[0, 2π)``.
    """
    u = np.asarray(target, dtype=complex)
    det = np.linalg.det(u)
    su = u / np.sqrt(det)
    alpha, beta = su[0, 0], su[1, 0]
    mid = 2.0 * np.arctan2(abs(beta), abs(alpha))
    if abs(beta) < 1e-12:
        plus, minus = -2.0 * np.angle(alpha), 0.0
    elif abs(alpha) < 1e-12:
        plus, minus = 0.0, -2.0 * (np.angle(beta) + np.pi / 2)
    else:
        plus = -2.0 * np.angle(alpha)
        minus = -2.0 * (np.angle(beta) + np.pi / 2)
    first = 0.5 * (plus + minus)
    last = 0.5 * (plus - minus)
    return (float(first % TWO_PI), float(mid % TWO_PI), float(last % TWO_PI))


def analyzer_for(label: str, frame: np.ndarray | None = None) -> AnalyzerState:
    """Analyzer whose net unitary maps ``|label⟩`` to ``|H⟩`` after ``frame``.

    ``frame`` is an extra unitary the photon sees before the analyzer's basis
    rotation (used for fiber-frame correction); the last plate is left at 0.
    """
    psi = basis_state(label)
    perp = basis_state(ORTHOGONAL[label])
    rotate = np.outer(_STATES["H"], psi.conj()) + np.outer(_STATES["V"], perp.conj())
    if frame is not None:
        rotate = rotate @ frame
    r0, r1, r2 = solve_retardances(rotate)
    return AnalyzerState.from_retardances((r0, r1, r2, 0.0))


def projection_probability(state, analyzer: AnalyzerState) -> float:
    """Malus-law probability ``|⟨H|U|ψ⟩|²`` (or ``⟨H|UρU†|H⟩`` for a 2×2 density matrix)."""
    u = analyzer_unitary(analyzer)
    state = np.asarray(state, dtype=complex)
    if state.shape == (2,):
        amp = (u @ state)[0]
        return float(abs(amp) ** 2)
    if state.shape == (2, 2):
        return float(np.real((u @ state @ u.conj().T)[0, 0]))
    raise ValueError("state must be a Jones vector or a 2x2 density matrix")


def coincidence_probability(rho: np.ndarray, basis_a, basis_b) -> float:
    """``Tr[ρ (Π_a ⊗ Π_b)]`` for labels or explicit Jones vectors."""
    op = np.kron(projector(basis_a), projector(basis_b))
    return float(np.real(np.trace(rho @ op)))


def pure_density(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


PHI_PLUS = np.array([1.0, 0.0, 0.0, 1.0], dtype=complex) / SQRT2
PHI_MINUS = np.array([1.0, 0.0, 0.0, -1.0], dtype=complex) / SQRT2
PSI_PLUS = np.array([0.0, 1.0, 1.0, 0.0], dtype=complex) / SQRT2
PSI_MINUS = np.array([0.0, 1.0, -1.0, 0.0], dtype=complex) / SQRT2
_BELL = {"phi+": PHI_PLUS, "phi-": PHI_MINUS, "psi+": PSI_PLUS, "psi-": PSI_MINUS}


def bell_vector(kind: str = "phi+") -> np.ndarray:
    try:
        return _BELL[kind.lower()].copy()
    except KeyError:
        raise ValueError(f"unknown Bell state {kind!r}") from None


def bell_state(kind: str = "phi+") -> np.ndarray:
    return pure_density(bell_vector(kind))


def werner_state(p: float) -> np.ndarray:
    """``p |Φ⁺⟩⟨Φ⁺| + (1-p) I/4``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Werner weight must lie in [0, 1], got {p}")
    return p * bell_state("phi+") + (1.0 - p) * np.eye(4, dtype=complex) / 4.0


def dephased_bell_state(visibility: float, dephasing: float = 0.0) -> np.ndarray:
    """Φ⁺ with a fraction ``dephasing`` of its HH/VV coherence removed, mixed toward I/4.

    ``visibility`` is the weight kept against white noise.
    """
    if not 0.0 <= dephasing <= 1.0:
        raise ValueError("dephasing must lie in [0, 1]")
    classical = (pure_density(np.array([1, 0, 0, 0])) + pure_density(np.array([0, 0, 0, 1]))) / 2.0
    core = (1.0 - dephasing) * bell_state("phi+") + dephasing * classical
    return visibility * core + (1.0 - visibility) * np.eye(4, dtype=complex) / 4.0


def fidelity(rho: np.ndarray, target) -> float:
    """Overlap ``⟨t|ρ|t⟩`` with a pure target (4-vector or Bell-state name)."""
    if isinstance(target, str):
        target = bell_vector(target)
    t = np.asarray(target, dtype=complex)
    if t.shape == (2, 2) or t.ndim == 2:
        raise ValueError("fidelity target must be a pure state vector")
    t = t / np.linalg.norm(t)
    value = np.vdot(t, rho @ t)
    return float(np.real(value))


_YY = np.kron(SIGMA_Y, SIGMA_Y)


def concurrence(rho: np.ndarray) -> float:
    """Wootters concurrence ``max(0, λ1-λ2-λ3-λ4)``."""
    rho = np.asarray(rho, dtype=complex)
    r = rho @ _YY @ rho.conj() @ _YY
    eig = np.linalg.eigvals(r)
    lam = np.sqrt(np.clip(np.real(eig), 0.0, None))
    lam = np.sort(lam)[::-1]
    return float(max(0.0, lam[0] - lam[1] - lam[2] - lam[3]))


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    eig = np.linalg.eigvalsh(a - b)
    return float(0.5 * np.sum(np.abs(eig)))


def check_density_matrix(rho: np.ndarray, atol: float = 1e-10) -> None:
    """Raise ``ValueError`` unless ``rho`` is Hermitian, unit-trace and PSD."""
    rho = np.asarray(rho)
    if rho.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got {rho.shape}")
    if not np.allclose(rho, rho.conj().T, atol=atol, rtol=0):
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1.0) > atol:
        raise ValueError(f"density matrix trace {np.trace(rho).real:.3g} != 1")
    if np.linalg.eigvalsh(rho).min() < -1e-9:
        raise ValueError("density matrix has a negative eigenvalue")


def su2_from_vector(rotation: np.ndarray) -> np.ndarray:
    """``exp(-i (r·σ)/2)``: a Poincaré-sphere rotation by ``|r|`` about ``r``."""
    rotation = np.asarray(rotation, dtype=float)
    angle = float(np.linalg.norm(rotation))
    if angle == 0.0:
        return np.eye(2, dtype=complex)
    n = rotation / angle
    gen = n[0] * SIGMA_Z + n[1] * SIGMA_X + n[2] * SIGMA_Y
    return np.cos(angle / 2) * np.eye(2, dtype=complex) - 1j * np.sin(angle / 2) * gen


def random_unitary(rng: np.random.Generator) -> np.ndarray:
    """Haar-random 2×2 unitary."""
    z = (rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))) / SQRT2
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))
