import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qnetctl import polarization as pol

angles = st.floats(0.0, 2 * np.pi, allow_nan=False)
weights = st.floats(0.0, 1.0, allow_nan=False)


def _is_unitary(u):
    return np.allclose(u @ u.conj().T, np.eye(2), atol=1e-12)


def _same_up_to_phase(a, b, atol=1e-9):
    k = np.vdot(b.ravel(), a.ravel())
    if abs(k) < 1e-12:
        return False
    return np.allclose(a, (k / abs(k)) * b, atol=atol)


# -- single-qubit algebra -----------------------------------------------------

def test_basis_states_are_unit_and_pairs_orthogonal():
    for label in pol.BASIS_LABELS:
        psi = pol.basis_state(label)
        assert np.isclose(np.linalg.norm(psi), 1.0)
        assert abs(np.vdot(psi, pol.basis_state(pol.ORTHOGONAL[label]))) < 1e-12


def test_unknown_label_rejected():
    with pytest.raises(ValueError):
        pol.basis_state("X")


@given(st.lists(angles, min_size=4, max_size=4))
def test_analyzer_unitary_is_unitary(r):
    assert _is_unitary(pol.analyzer_unitary(pol.AnalyzerState.from_retardances(r)))


def test_zero_retardance_is_identity():
    assert np.allclose(pol.analyzer_unitary(pol.AnalyzerState()), np.eye(2))


def test_half_wave_plate_at_zero_maps_d_to_a():
    u = pol.waveplate_unitary(pol.Waveplate(0.0, np.pi))
    assert _same_up_to_phase(u @ pol.basis_state("D"), pol.basis_state("A"))


def test_analyzer_requires_four_plates():
    with pytest.raises(ValueError):
        pol.AnalyzerState.from_retardances([0, 0, 0])


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_solve_retardances_reaches_any_unitary(seed):
    target = pol.random_unitary(np.random.default_rng(seed))
    r = pol.solve_retardances(target)
    assert all(0.0 <= x < 2 * np.pi for x in r)
    u = pol.analyzer_unitary(pol.AnalyzerState.from_retardances((*r, 0.0)))
    assert _same_up_to_phase(u, target)


@pytest.mark.parametrize("label", pol.BASIS_LABELS)
def test_analyzer_for_passes_label_and_blocks_orthogonal(label):
    a = pol.analyzer_for(label)
    assert np.isclose(pol.projection_probability(pol.basis_state(label), a), 1.0)
    assert pol.projection_probability(pol.basis_state(pol.ORTHOGONAL[label]), a) < 1e-12


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.sampled_from(pol.BASIS_LABELS))
def test_analyzer_for_undoes_frame(seed, label):
    frame = pol.random_unitary(np.random.default_rng(seed))
    a = pol.analyzer_for(label, frame)
    assert np.isclose(pol.projection_probability(frame.conj().T @ pol.basis_state(label), a), 1.0, atol=1e-9)


@given(angles)
def test_malus_law(theta):
    psi = np.array([np.cos(theta), np.sin(theta)], dtype=complex)
    assert np.isclose(pol.projection_probability(psi, pol.AnalyzerState()), np.cos(theta) ** 2)
    assert np.isclose(pol.projection_probability(pol.projector(psi), pol.AnalyzerState()), np.cos(theta) ** 2)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
def test_su2_from_vector_is_special_unitary(x, y, z):
    u = pol.su2_from_vector([x, y, z])
    assert _is_unitary(u)
    assert np.isclose(np.linalg.det(u), 1.0)


def test_su2_full_turn_about_h_axis_is_minus_identity():
    assert np.allclose(pol.su2_from_vector([2 * np.pi, 0, 0]), -np.eye(2))


def test_random_unitary_is_unitary(rng):
    for _ in range(20):
        assert _is_unitary(pol.random_unitary(rng))


# -- two-qubit states ---------------------------------------------------------

@given(weights)
def test_werner_is_valid_density_matrix(p):
    pol.check_density_matrix(pol.werner_state(p))


@given(weights, weights)
def test_dephased_is_valid_density_matrix(w, q):
    pol.check_density_matrix(pol.dephased_bell_state(w, q))


@pytest.mark.parametrize("p", [0.0, 0.2, 1 / 3, 0.5, 0.8, 0.95, 1.0])
def test_werner_fidelity_and_concurrence_closed_form(p):
    rho = pol.werner_state(p)
    assert np.isclose(pol.fidelity(rho, "phi+"), (1 + 3 * p) / 4, atol=1e-12)
    assert np.isclose(pol.concurrence(rho), max(0.0, (3 * p - 1) / 2), atol=1e-9)


def test_werner_out_of_range():
    with pytest.raises(ValueError):
        pol.werner_state(1.2)


@pytest.mark.parametrize("kind", ["phi+", "phi-", "psi+", "psi-"])
def test_bell_states_are_maximally_entangled(kind):
    rho = pol.bell_state(kind)
    assert np.isclose(pol.concurrence(rho), 1.0, atol=1e-9)
    assert np.isclose(pol.fidelity(rho, kind), 1.0)


def test_product_state_has_zero_concurrence():
    psi = np.kron(pol.basis_state("H"), pol.basis_state("D"))
    assert pol.concurrence(pol.pure_density(psi)) < 1e-9


@pytest.mark.parametrize("p", [0.5, 0.8, 1.0])
@pytest.mark.parametrize("b", ["H", "V", "D", "A", "R", "L"])
def test_werner_two_photon_fringe_visibility(p, b):
    # Φ⁺ pairs analysed with b on one side and b rotated about the fringe on the other.
    rho = pol.werner_state(p)
    same = pol.coincidence_probability(rho, b, b if b in "HVDA" else pol.ORTHOGONAL[b])
    cross = pol.coincidence_probability(rho, b, pol.ORTHOGONAL[b] if b in "HVDA" else b)
    assert np.isclose((same - cross) / (same + cross), p, atol=1e-12)


def test_dephasing_only_affects_coherence():
    w, q = 0.97, 0.22
    rho = pol.dephased_bell_state(w, q)
    vis = lambda a, b: (pol.coincidence_probability(rho, a, a) - pol.coincidence_probability(rho, a, b)) / (
        pol.coincidence_probability(rho, a, a) + pol.coincidence_probability(rho, a, b))
    assert np.isclose(vis("H", "V"), w)
    assert np.isclose(vis("D", "A"), w * (1 - q))


def test_trace_distance_bounds():
    a, b = pol.bell_state("phi+"), pol.bell_state("psi-")
    assert np.isclose(pol.trace_distance(a, b), 1.0)
    assert np.isclose(pol.trace_distance(a, a), 0.0)


def test_check_density_matrix_rejects_bad_input():
    with pytest.raises(ValueError):
        pol.check_density_matrix(np.eye(4))
    with pytest.raises(ValueError):
        pol.check_density_matrix(np.diag([1.5, -0.5, 0, 0]))
    with pytest.raises(ValueError):
        pol.check_density_matrix(np.eye(2) / 2)
